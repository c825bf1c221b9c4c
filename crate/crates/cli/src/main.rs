fn main() {
    std::process::exit(igq_cli::main_with(std::env::args_os()));
}
