use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn igq(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_igq"));
    cmd.args(args).env_remove("IGQ_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let r = igq(
        &["synth", "--seed", "3", "--calib-samples", "8", "--eval-samples", "6", "--out", data.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    data
}

fn base_sets(data: &Path, out: &Path) -> Vec<String> {
    vec![
        format!("model={}", data.join("model.json").display()),
        format!("calib={}", data.join("calib.json").display()),
        format!("eval={}", data.join("eval.json").display()),
        format!("output={}", out.display()),
    ]
}

fn with_sets<'a>(cmd: &'a str, sets: &'a [String], extra: &'a [&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    for s in sets {
        v.push("--set");
        v.push(s);
    }
    v.extend_from_slice(extra);
    v
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn fixed_groups_are_reported_at_every_grouped_site() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("cal");
    let sets = base_sets(&data, &out);
    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=8"]), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = read_json(&out.join("report.json"));
    let sizes = report["group_sizes"].as_object().unwrap();
    // four blocks of qkv_in, attn, proj_in, fc1_in, fc2_in plus head_in
    assert_eq!(sizes.len(), 21);
    assert!(sizes.values().all(|v| v == 8));
    let sites = report["calibration"]["sites"].as_array().unwrap();
    assert!(sites
        .iter()
        .filter(|s| s["mode"] == "igq:8")
        .all(|s| !s["em_trace"].as_array().unwrap().is_empty()));
    assert!(out.join("model.json").is_file() && out.join("model.bin").is_file());
}

#[test]
fn budget_run_stays_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let bops = igq(&["bops", "--set", "spec=toy", "--sweep", "8"], &[]);
    assert_eq!(bops.code, 0, "{}", bops.stderr);
    let budget = serde_json::from_str::<Value>(&bops.stdout).unwrap()[0]["report"]["total"]
        .as_u64()
        .unwrap();
    let out = dir.path().join("alloc");
    let sets = base_sets(&data, &out);
    let b = format!("budget={budget}");
    let extra = ["--set", &b, "--set", "n_iter=20", "--set", "period=10"];
    let r = igq(&with_sets("calibrate", &sets, &extra), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = read_json(&out.join("report.json"));
    let alloc = &report["allocation"];
    assert!(alloc["bops"].as_u64().unwrap() <= budget);
    assert_eq!(report["bops"]["total"], alloc["bops"]);
    assert_eq!(alloc["updates"].as_array().unwrap().len(), 2);
    assert!(alloc["psi_table"]["psi"].as_array().unwrap().len() == 21);

    let out2 = dir.path().join("alloc2");
    let sets = base_sets(&data, &out2);
    let r = igq(&with_sets("allocate", &sets, &extra), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let a = read_json(&out2.join("allocation.json"));
    assert_eq!(a["allocation"], *alloc);
    assert!(!out2.join("model.json").exists());
}

#[test]
fn calibrate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    // the output path is echoed in the report, so both runs share it
    let out = dir.path().join("run");
    let sets = base_sets(&data, &out);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=4"]), &[]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let files: Vec<Vec<u8>> = ["report.json", "model.json", "model.bin"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        std::fs::remove_dir_all(&out).unwrap();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("cal");
    let sets = base_sets(&data, &out);
    let r = igq(
        &with_sets("calibrate", &sets, &["--set", "groups=2", "--set", "seed=1"]),
        &[("IGQ_SEED", "77")],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(read_json(&out.join("report.json"))["config"]["seed"], 77);
    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=2"]), &[("IGQ_SEED", "seven")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("IGQ_SEED"));
}

#[test]
fn exit_codes_and_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("never");
    let sets = base_sets(&data, &out);

    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=8", "--set", "act_bits=9"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("act_bits"));

    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=8", "--set", "budget=5"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("budget"));

    let r = igq(&with_sets("calibrate", &sets, &["--set", "budget=5"]), &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=8", "--set", "nonsense=1"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("nonsense"));

    let r = igq(&with_sets("calibrate", &sets, &["--set", "groups=100"]), &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);

    let bad = dir.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::copy(data.join("model.json"), bad.join("model.json")).unwrap();
    std::fs::write(bad.join("model.bin"), [0u8; 10]).unwrap();
    let mut sets_bad = sets.clone();
    sets_bad[0] = format!("model={}", bad.join("model.json").display());
    let r = igq(&with_sets("calibrate", &sets_bad, &["--set", "groups=8"]), &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    let mut missing = sets.clone();
    missing[2] = "eval=/nonexistent/eval.json".into();
    let r = igq(&with_sets("eval", &missing, &["--set", "groups=8"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("eval"));

    assert!(!out.exists());
}

#[test]
fn eval_sweep_rows_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("ev");
    let sets = base_sets(&data, &out);
    let r = igq(
        &with_sets("eval", &sets, &["--sweep", "1,2,4,8,16", "--modes", "layer-wise,igq"]),
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(csv.lines().next(), Some("mode,G,mean_kl,mean_mse"));
    assert_eq!(rows.len(), 10);
    for mode in ["layer-wise", "igq"] {
        assert_eq!(rows.iter().filter(|r| r[0] == mode).count(), 5);
    }
    let kl = |mode: &str, g: &str| -> f64 {
        rows.iter().find(|r| r[0] == mode && r[1] == g).unwrap()[2].parse().unwrap()
    };
    assert!(kl("igq", "8") < kl("layer-wise", "8"));
    assert_eq!(kl("igq", "1"), kl("layer-wise", "1"));
    let report = read_json(&out.join("eval.json"));
    assert_eq!(report["runs"][0]["instances"].as_array().unwrap().len(), 6);
}

#[test]
fn disabled_quantization_has_zero_kl() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("ev");
    let sets = base_sets(&data, &out);
    let extra = [
        "--set",
        "modes.fc_input=disabled",
        "--set",
        "modes.attention=disabled",
        "--set",
        "modes.qkv=disabled",
        "--set",
        "quantize_weights=false",
    ];
    let r = igq(&with_sets("eval", &sets, &extra), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = read_json(&out.join("eval.json"));
    assert_eq!(report["runs"][0]["mean_kl"], 0.0);
    assert_eq!(report["runs"][0]["mean_mse"], 0.0);
}

#[test]
fn eval_of_calibrated_container() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cal = dir.path().join("cal");
    let r = igq(&with_sets("calibrate", &base_sets(&data, &cal), &["--set", "groups=8"]), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let ev = dir.path().join("ev");
    let q = cal.join("model.json");
    let sets = base_sets(&data, &ev);
    let r = igq(&with_sets("eval", &sets, &["--quantized", q.to_str().unwrap()]), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let direct = read_json(&ev.join("eval.json"))["runs"][0]["mean_kl"].as_f64().unwrap();
    let ev2 = dir.path().join("ev2");
    let r = igq(&with_sets("eval", &base_sets(&data, &ev2), &["--set", "groups=8"]), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let fresh = read_json(&ev2.join("eval.json"))["runs"][0]["mean_kl"].as_f64().unwrap();
    assert_eq!(direct, fresh);
    assert!(direct > 0.0);
}

#[test]
fn bops_reports() {
    let r = igq(&["bops", "--set", "spec=toy", "--set", "groups=1"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let one: Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(one["layers"].as_array().unwrap().iter().all(|l| l["fp_sum"] == 0));

    let r = igq(&["bops", "--set", "spec=deit-b-like", "--sweep", "4,8,16"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let s: Value = serde_json::from_str(&r.stdout).unwrap();
    let f = |i: usize, k: &str| s[i]["report"][k].as_u64().unwrap();
    assert_eq!(f(1, "assign"), 2 * f(0, "assign"));
    assert_eq!(f(2, "assign"), 2 * f(1, "assign"));
    assert_eq!(f(0, "fp_sum") * 7, f(1, "fp_sum") * 3);
    assert_eq!(f(0, "fp_sum") * 15, f(2, "fp_sum") * 3);
    assert_eq!(f(0, "minmax"), f(2, "minmax"));
    let overhead = f(2, "minmax") + f(2, "assign") + f(2, "fp_sum");
    assert!(overhead as f64 <= 0.04 * f(2, "model") as f64);

    let r = igq(&["bops", "--set", "spec=resnet"], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("spec"));
}
