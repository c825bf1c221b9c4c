//! Subcommand bodies. Each one validates and computes everything before the
//! first output file is written.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use igq_core::alloc::{allocation_loop, AllocationOutcome};
use igq_core::bops::{model_bops, partial_bops, uniform_groups, BopReport};
use igq_core::eval::{output_errors, EvalSummary, InstanceError};
use igq_core::tensor::Tensor;
use igq_core::vit::container::write_atomic;
use igq_core::vit::sites::{act_site_kind, act_site_name};
use igq_core::vit::{
    calibrate_with_stats, collect_stats, load_container, save_container, synthetic_samples, CalibratedModel,
    CalibrationReport, ModelContainer, ModelSpec, QuantizationSiteMap, SiteMode, SiteStats, VitModel,
};

use crate::config::{preset_spec, ModeName, RunConfig};
use crate::CliError;

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("reports serialize");
    s.push(b'\n');
    s
}

/// Writes `(file name, bytes)` pairs into `dir`, each atomically.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<VitModel, CliError> {
    let path = cfg.model.as_deref().expect("checked by require_files");
    Ok(VitModel::from_container(&load_container(path)?)?)
}

fn load_samples(path: &Path, spec: &ModelSpec, field: &str) -> Result<Vec<Tensor>, CliError> {
    let samples = load_container(path)?.samples()?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{field}: batch holds no samples")));
    }
    let want = [spec.n_tokens, spec.dim];
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.shape() != want) {
        return Err(CliError::Config(format!(
            "{field}: sample {i} has shape {:?}, model expects {want:?}",
            s.shape()
        )));
    }
    Ok(samples)
}

/// Group counts of instance-aware sites that the BOP model prices.
fn igq_groups(spec: &ModelSpec, map: &QuantizationSiteMap) -> BTreeMap<String, usize> {
    map.activations
        .iter()
        .enumerate()
        .filter(|(i, _)| act_site_kind(spec, *i).is_allocatable())
        .filter_map(|(i, sc)| match sc.mode {
            SiteMode::Igq(g) => Some((act_site_name(spec, i), g)),
            _ => None,
        })
        .collect()
}

/// Group count of every site in a grouped mode.
fn grouped_sizes(spec: &ModelSpec, map: &QuantizationSiteMap) -> BTreeMap<String, usize> {
    map.activations
        .iter()
        .enumerate()
        .filter_map(|(i, sc)| match sc.mode {
            SiteMode::Igq(g) | SiteMode::Consecutive(g) | SiteMode::Sorted(g) => Some((act_site_name(spec, i), g)),
            _ => None,
        })
        .collect()
}

struct Calibrated {
    cm: CalibratedModel,
    report: CalibrationReport,
    allocation: Option<AllocationOutcome>,
}

/// Fixed-size calibration, followed by allocation when a budget is set.
fn calibrate_run(
    cfg: &RunConfig,
    model: &VitModel,
    stats: &SiteStats,
    samples: &[Tensor],
    map: &QuantizationSiteMap,
) -> Result<Calibrated, CliError> {
    let calib = cfg.calibration();
    let (mut cm, mut report) = calibrate_with_stats(model, stats, map, &calib)?;
    let allocation = match cfg.budget {
        Some(b) => {
            let out = allocation_loop(&mut cm, stats, samples, &calib, &cfg.allocation(b))?;
            for site in &mut report.sites {
                if let Some(&g) = out.sizes.get(&site.name) {
                    let trace = out.em_traces[&site.name].clone();
                    site.mode = SiteMode::Igq(g);
                    site.groups = Some(g);
                    site.converged = Some(match trace.as_slice() {
                        [.., a, b] => (a - b).abs() <= cfg.tol * a.abs().max(f64::MIN_POSITIVE),
                        _ => false,
                    });
                    site.em_trace = trace;
                }
            }
            Some(out)
        }
        None => None,
    };
    Ok(Calibrated {
        cm,
        report,
        allocation,
    })
}

#[derive(Serialize)]
struct CalibrateReport<'a> {
    config: &'a RunConfig,
    model_spec: ModelSpec,
    group_sizes: BTreeMap<String, usize>,
    bops: BopReport,
    calibration: CalibrationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    allocation: Option<AllocationOutcome>,
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.require_files(&["model", "calib"])?;
    let out = cfg.output_dir()?;
    let model = load_model(cfg)?;
    let spec = model.spec;
    let map = cfg.site_map(&spec)?;
    let samples = load_samples(cfg.calib.as_deref().unwrap(), &spec, "calib")?;
    let stats = collect_stats(&model, &samples)?;
    let run = calibrate_run(cfg, &model, &stats, &samples, &map)?;
    let sites = &run.cm.sites;
    let report = CalibrateReport {
        config: cfg,
        model_spec: spec,
        group_sizes: grouped_sizes(&spec, sites),
        bops: partial_bops(&spec, &igq_groups(&spec, sites), cfg.act_bits as u32, cfg.weight_bits as u32)?,
        calibration: run.report,
        allocation: run.allocation,
    };
    let report = to_json(&report);
    let container = run.cm.to_container();
    std::fs::create_dir_all(out)?;
    save_container(&container, &out.join("model.json"))?;
    write_outputs(out, &[("report.json", report)])
}

#[derive(Serialize)]
struct AllocateReport<'a> {
    config: &'a RunConfig,
    model_spec: ModelSpec,
    allocation: AllocationOutcome,
    bops: BopReport,
}

pub fn allocate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.require_files(&["model", "calib"])?;
    let out = cfg.output_dir()?;
    if cfg.budget.is_none() {
        return Err(CliError::Config("budget: required for allocate".into()));
    }
    let model = load_model(cfg)?;
    let spec = model.spec;
    let map = cfg.site_map(&spec)?;
    let samples = load_samples(cfg.calib.as_deref().unwrap(), &spec, "calib")?;
    let stats = collect_stats(&model, &samples)?;
    let run = calibrate_run(cfg, &model, &stats, &samples, &map)?;
    let report = AllocateReport {
        config: cfg,
        model_spec: spec,
        bops: partial_bops(&spec, &igq_groups(&spec, &run.cm.sites), cfg.act_bits as u32, cfg.weight_bits as u32)?,
        allocation: run.allocation.expect("budget set"),
    };
    write_outputs(out, &[("allocation.json", to_json(&report))])
}

#[derive(Serialize)]
struct EvalRun {
    mode: String,
    groups: Option<usize>,
    mean_kl: f64,
    mean_mse: f64,
    instances: Vec<InstanceError>,
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    runs: Vec<EvalRun>,
}

fn eval_csv(runs: &[EvalRun]) -> Vec<u8> {
    let mut s = String::from("mode,G,mean_kl,mean_mse\n");
    for r in runs {
        let g = r.groups.map(|g| g.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{g},{},{}\n", r.mode, r.mean_kl, r.mean_mse));
    }
    s.into_bytes()
}

pub fn eval(cfg: &RunConfig, quantized: Option<&Path>, sweep: &[usize], modes: &[String]) -> Result<(), CliError> {
    let out = cfg.output_dir()?;
    cfg.require_files(&["eval"])?;
    let modes: Vec<ModeName> = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
    if let Some(&g) = sweep.iter().find(|&&g| g == 0) {
        return Err(CliError::Config(format!("--sweep: group count {g} must be at least 1")));
    }
    let mut runs = Vec::new();
    let n_samples;
    if let Some(q) = quantized {
        if !sweep.is_empty() {
            return Err(CliError::Config("--sweep: cannot be combined with --quantized".into()));
        }
        if !q.is_file() {
            return Err(CliError::Config(format!("--quantized: file not found: {}", q.display())));
        }
        let cm = CalibratedModel::from_container(&load_container(q)?)?;
        let samples = load_samples(cfg.eval.as_deref().unwrap(), cm.spec(), "eval")?;
        n_samples = samples.len();
        let e = output_errors(&cm, &samples)?;
        runs.push(EvalRun {
            mode: "calibrated".into(),
            groups: None,
            mean_kl: e.mean_kl,
            mean_mse: e.mean_mse,
            instances: e.instances,
        });
    } else {
        cfg.require_files(&["model", "calib"])?;
        if !sweep.is_empty() && cfg.budget.is_some() {
            return Err(CliError::Config("budget: cannot be combined with --sweep".into()));
        }
        let model = load_model(cfg)?;
        let spec = model.spec;
        let calib = load_samples(cfg.calib.as_deref().unwrap(), &spec, "calib")?;
        let samples = load_samples(cfg.eval.as_deref().unwrap(), &spec, "eval")?;
        n_samples = samples.len();
        let stats = collect_stats(&model, &calib)?;
        // (label, G, config) for every run
        let mut plans: Vec<(String, Option<usize>, RunConfig)> = Vec::new();
        if sweep.is_empty() {
            let label = if cfg.budget.is_some() { "allocated" } else { "configured" };
            plans.push((label.into(), cfg.groups, cfg.clone()));
        } else {
            for &m in &modes {
                for &g in sweep {
                    let mut c = cfg.clone();
                    c.modes.fc_input = m;
                    c.modes.attention = m;
                    c.groups = Some(g);
                    c.group_sizes.clear();
                    plans.push((m.as_str().into(), Some(g), c));
                }
            }
        }
        let mut done: Vec<(QuantizationSiteMap, EvalSummary)> = Vec::new();
        for (label, g, c) in plans {
            let map = c.site_map(&spec)?;
            // modes without groups repeat the same result across the sweep
            let cached = if c.budget.is_none() {
                done.iter().find(|(m, _)| *m == map).map(|(_, r)| r.clone())
            } else {
                None
            };
            let e = match cached {
                Some(e) => e,
                None => {
                    let run = calibrate_run(&c, &model, &stats, &calib, &map)?;
                    let e = output_errors(&run.cm, &samples)?;
                    done.push((map, e.clone()));
                    e
                }
            };
            runs.push(EvalRun {
                mode: label,
                groups: g,
                mean_kl: e.mean_kl,
                mean_mse: e.mean_mse,
                instances: e.instances,
            });
        }
    }
    let csv = eval_csv(&runs);
    let report = EvalReport {
        samples: n_samples,
        runs,
    };
    write_outputs(out, &[("eval.json", to_json(&report)), ("eval.csv", csv)])
}

#[derive(Serialize)]
struct SweepEntry {
    groups: usize,
    report: BopReport,
}

pub fn bops(cfg: &RunConfig, sweep: &[usize]) -> Result<(), CliError> {
    let spec = match (&cfg.spec, &cfg.model) {
        (Some(s), _) => preset_spec(s)?,
        (None, Some(_)) => {
            cfg.require_files(&["model"])?;
            load_model(cfg)?.spec
        }
        (None, None) => return Err(CliError::Config("spec: give a preset or a model".into())),
    };
    let (b_a, b_w) = (cfg.act_bits as u32, cfg.weight_bits as u32);
    let bytes = if sweep.is_empty() {
        if cfg.budget.is_some() {
            return Err(CliError::Config("budget: bops needs fixed group sizes".into()));
        }
        let map = cfg.site_map(&spec)?;
        to_json(&partial_bops(&spec, &igq_groups(&spec, &map), b_a, b_w)?)
    } else {
        let mut entries = Vec::new();
        for &g in sweep {
            if g == 0 {
                return Err(CliError::Config("--sweep: group count 0 must be at least 1".into()));
            }
            entries.push(SweepEntry {
                groups: g,
                report: model_bops(&spec, Some(&uniform_groups(&spec, g)), b_a, b_w)?,
            });
        }
        to_json(&entries)
    };
    match &cfg.output {
        Some(dir) => write_outputs(dir, &[("bops.json", bytes)]),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

pub fn synth(preset: &str, seed: u64, calib: usize, eval: usize, out: &Path) -> Result<(), CliError> {
    let spec = preset_spec(preset)?;
    if calib == 0 || eval == 0 {
        return Err(CliError::Config("samples: batches need at least one sample".into()));
    }
    let model = VitModel::synthetic(spec, seed)?;
    let calib = ModelContainer::from_samples(&synthetic_samples(&spec, calib, seed.wrapping_add(1)));
    let eval = ModelContainer::from_samples(&synthetic_samples(&spec, eval, seed.wrapping_add(2)));
    std::fs::create_dir_all(out)?;
    save_container(&model.to_container(), &out.join("model.json"))?;
    save_container(&calib, &out.join("calib.json"))?;
    save_container(&eval, &out.join("eval.json"))?;
    Ok(())
}
