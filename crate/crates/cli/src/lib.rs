//! `igq` command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<igq_core::Error> for CliError {
    fn from(e: igq_core::Error) -> Self {
        use igq_core::Error as E;
        match e {
            E::InfeasibleBudget { .. } => CliError::Infeasible(e.to_string()),
            E::Io(_) | E::MalformedManifest(_) | E::TruncatedPayload { .. } | E::DuplicateName(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "igq", version, about = "Instance-aware group quantization for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set groups=8` or `--set modes.qkv=per-unit`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic model plus calibration and evaluation batches.
    Synth {
        /// `toy` or `deit-b-like`.
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        calib_samples: usize,
        #[arg(long, default_value_t = 16)]
        eval_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate every site and write the quantized model and report.json.
    Calibrate(ConfigArgs),
    /// Allocate group sizes under the configured budget without writing a model.
    Allocate(ConfigArgs),
    /// Output KL and MSE against full precision, per mode.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate this calibrated container instead of calibrating.
        #[arg(long)]
        quantized: Option<PathBuf>,
        /// Group counts to sweep, e.g. `1,2,4,8,16`.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Modes applied to FC inputs and attentions during a sweep.
        #[arg(long, value_delimiter = ',', default_value = "layer-wise,igq,consecutive-group")]
        modes: Vec<String>,
    },
    /// Itemized bit operations per layer.
    Bops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One report per group count, every grouped site at that count.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed_env = std::env::var(config::SEED_ENV).ok();
    let load = |a: &ConfigArgs| RunConfig::load(a.config.as_deref(), &a.sets, seed_env.as_deref());
    match cli.command {
        Command::Synth {
            preset,
            seed,
            calib_samples,
            eval_samples,
            out,
        } => commands::synth(&preset, seed, calib_samples, eval_samples, &out),
        Command::Calibrate(a) => commands::calibrate(&load(&a)?),
        Command::Allocate(a) => commands::allocate(&load(&a)?),
        Command::Eval {
            cfg,
            quantized,
            sweep,
            modes,
        } => commands::eval(&load(&cfg)?, quantized.as_deref(), &sweep, &modes),
        Command::Bops { cfg, sweep } => commands::bops(&load(&cfg)?, &sweep),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("igq: {e}");
            e.exit_code()
        }
    }
}
