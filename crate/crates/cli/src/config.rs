//! Run configuration: a JSON file, `--set key=value` overrides, and the
//! `IGQ_SEED` environment variable, in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use igq_core::alloc::{AllocationConfig, DEFAULT_CANDIDATES};
use igq_core::quant::WeightQuantConfig;
use igq_core::vit::sites::{act_site_kind, act_site_name, n_act_sites};
use igq_core::vit::{CalibrationConfig, ModelSpec, QuantizationSiteMap, SiteConfig, SiteKind, SiteMode};

use crate::CliError;

pub const SEED_ENV: &str = "IGQ_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Disabled,
    LayerWise,
    PerUnit,
    Igq,
    ConsecutiveGroup,
    SortedGroup,
}

impl ModeName {
    pub fn is_grouped(self) -> bool {
        matches!(self, ModeName::Igq | ModeName::ConsecutiveGroup | ModeName::SortedGroup)
    }

    pub fn with_groups(self, g: usize) -> SiteMode {
        match self {
            ModeName::Disabled => SiteMode::Disabled,
            ModeName::LayerWise => SiteMode::LayerWise,
            ModeName::PerUnit => SiteMode::PerUnit,
            ModeName::Igq => SiteMode::Igq(g),
            ModeName::ConsecutiveGroup => SiteMode::Consecutive(g),
            ModeName::SortedGroup => SiteMode::Sorted(g),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Disabled => "disabled",
            ModeName::LayerWise => "layer-wise",
            ModeName::PerUnit => "per-unit",
            ModeName::Igq => "igq",
            ModeName::ConsecutiveGroup => "consecutive-group",
            ModeName::SortedGroup => "sorted-group",
        }
    }
}

impl std::str::FromStr for ModeName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| CliError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modes {
    pub fc_input: ModeName,
    pub attention: ModeName,
    /// Queries, keys and values.
    pub qkv: ModeName,
}

impl Default for Modes {
    fn default() -> Self {
        Self {
            fc_input: ModeName::Igq,
            attention: ModeName::Igq,
            qkv: ModeName::LayerWise,
        }
    }
}

impl Modes {
    pub fn for_kind(&self, kind: SiteKind) -> ModeName {
        match kind {
            SiteKind::FcInput | SiteKind::Weight => self.fc_input,
            SiteKind::SoftmaxAttention => self.attention,
            SiteKind::Query | SiteKind::Key | SiteKind::Value => self.qkv,
        }
    }

    fn any_grouped(&self) -> bool {
        [self.fc_input, self.attention, self.qkv].iter().any(|m| m.is_grouped())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model container manifest.
    pub model: Option<PathBuf>,
    /// Calibration batch container manifest.
    pub calib: Option<PathBuf>,
    /// Evaluation batch container manifest.
    pub eval: Option<PathBuf>,
    /// Output directory.
    pub output: Option<PathBuf>,
    /// Built-in model shape (`toy` or `deit-b-like`) for `bops` without a model.
    pub spec: Option<String>,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub quantize_weights: bool,
    /// Overrides the weight percentile ε (in percent).
    pub eps_percentile: Option<f64>,
    pub modes: Modes,
    /// Group count at every grouped site.
    pub groups: Option<usize>,
    /// Per-site group counts, overriding `groups`.
    pub group_sizes: BTreeMap<String, usize>,
    /// BOP budget; group sizes of instance-aware sites are then allocated.
    pub budget: Option<u64>,
    /// Starting group count when allocating.
    pub init_groups: usize,
    pub candidates: Vec<usize>,
    pub n_iter: usize,
    pub period: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            calib: None,
            eval: None,
            output: None,
            spec: None,
            weight_bits: 4,
            act_bits: 4,
            quantize_weights: true,
            eps_percentile: None,
            modes: Modes::default(),
            groups: None,
            group_sizes: BTreeMap::new(),
            budget: None,
            init_groups: 8,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            n_iter: 300,
            period: 75,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Sets `key` or `section.name` in a JSON object. Only the first dot nests,
/// so `group_sizes.block1.attn` names the site `block1.attn`.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let obj = root.as_object_mut().expect("checked by caller");
    match key.split_once('.') {
        None if !key.is_empty() => {
            obj.insert(key.to_string(), value);
        }
        Some((section, name)) if !section.is_empty() && !name.is_empty() => {
            let entry = obj
                .entry(section.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
            entry
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("--set {key}: {section} is not an object")))?
                .insert(name.to_string(), value);
        }
        _ => return Err(CliError::Config(format!("--set: bad key {key:?}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Reads the optional config file, applies overrides and the seed
    /// variable. `seed_env` is the value of `IGQ_SEED`, if set.
    pub fn load(path: Option<&Path>, sets: &[String], seed_env: Option<&str>) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("config: cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config: {e}")))?
            }
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            return Err(CliError::Config("config: top level must be an object".into()));
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set {s:?}: expected key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut root, k.trim(), v)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(s) = seed_env {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: {s:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        for (field, b) in [("act_bits", self.act_bits), ("weight_bits", self.weight_bits)] {
            if !(2..=8).contains(&b) {
                return bad(field, format!("{b} is outside 2..=8"));
            }
        }
        if let Some(e) = self.eps_percentile {
            if !(0.0..50.0).contains(&e) {
                return bad("eps_percentile", format!("{e} is outside [0, 50)"));
            }
        }
        if self.n_iter == 0 {
            return bad("n_iter", "must be at least 1".into());
        }
        if self.period == 0 {
            return bad("period", "must be at least 1".into());
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad("tol", "must be non-negative".into());
        }
        if self.init_groups == 0 {
            return bad("init_groups", "must be at least 1".into());
        }
        if self.groups == Some(0) {
            return bad("groups", "must be at least 1".into());
        }
        if let Some((k, _)) = self.group_sizes.iter().find(|(_, &g)| g == 0) {
            return bad("group_sizes", format!("{k} must have at least 1 group"));
        }
        if self.candidates.is_empty() || self.candidates.windows(2).any(|w| w[0] >= w[1]) || self.candidates[0] == 0 {
            return bad("candidates", "must be positive and strictly increasing".into());
        }
        let fixed = self.groups.is_some() || !self.group_sizes.is_empty();
        if self.budget.is_some() && fixed {
            return bad("budget", "give either a budget or fixed group sizes, not both".into());
        }
        if self.budget.is_some() && self.modes.fc_input != ModeName::Igq && self.modes.attention != ModeName::Igq {
            return bad("budget", "allocation needs igq at fc inputs or attentions".into());
        }
        if let Some(s) = &self.spec {
            preset_spec(s)?;
        }
        Ok(())
    }

    /// Fails unless every named path field is set and the file exists.
    pub fn require_files(&self, fields: &[&str]) -> Result<(), CliError> {
        for &f in fields {
            let p = match f {
                "model" => &self.model,
                "calib" => &self.calib,
                "eval" => &self.eval,
                _ => unreachable!("not a file field"),
            };
            match p {
                None => return Err(CliError::Config(format!("{f}: required"))),
                Some(p) if !p.is_file() => {
                    return Err(CliError::Config(format!("{f}: file not found: {}", p.display())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("output: required".into()))
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            max_iter: self.n_iter,
            tol: self.tol,
            seed: self.seed,
        }
    }

    pub fn allocation(&self, budget: u64) -> AllocationConfig {
        AllocationConfig {
            candidates: self.candidates.clone(),
            n_iter: self.n_iter,
            period: self.period,
            budget,
            act_bits: self.act_bits as u32,
            weight_bits: self.weight_bits as u32,
        }
    }

    /// Per-site modes and bits for a model. Group counts come from
    /// `group_sizes`, then `groups`, then `init_groups` when allocating.
    pub fn site_map(&self, spec: &ModelSpec) -> Result<QuantizationSiteMap, CliError> {
        if self.modes.any_grouped() && self.budget.is_none() && self.groups.is_none() {
            return Err(CliError::Config("groups: grouped modes need a group count or a budget".into()));
        }
        let names: Vec<String> = (0..n_act_sites(spec)).map(|i| act_site_name(spec, i)).collect();
        for k in self.group_sizes.keys() {
            let i = names
                .iter()
                .position(|n| n == k)
                .ok_or_else(|| CliError::Config(format!("group_sizes: unknown site {k}")))?;
            if !self.modes.for_kind(act_site_kind(spec, i)).is_grouped() {
                return Err(CliError::Config(format!("group_sizes: site {k} is not in a grouped mode")));
            }
        }
        let fallback = self.groups.unwrap_or(self.init_groups);
        let activations = names
            .iter()
            .enumerate()
            .map(|(i, n)| SiteConfig {
                mode: self
                    .modes
                    .for_kind(act_site_kind(spec, i))
                    .with_groups(self.group_sizes.get(n).copied().unwrap_or(fallback)),
                bits: self.act_bits,
            })
            .collect();
        let mut map = QuantizationSiteMap::uniform(spec, igq_core::vit::ModeSet::all(SiteMode::Disabled), 8, 8);
        map.activations = activations;
        let wq = WeightQuantConfig::for_bits(self.weight_bits);
        for w in &mut map.weights {
            w.enabled = self.quantize_weights;
            w.bits = self.weight_bits;
            w.eps_percentile = self.eps_percentile.unwrap_or(wq.eps_percentile);
        }
        map.validate(spec).map_err(|e| CliError::Config(format!("modes: {e}")))?;
        Ok(map)
    }
}

pub fn preset_spec(name: &str) -> Result<ModelSpec, CliError> {
    match name {
        "toy" => Ok(ModelSpec::toy()),
        "deit-b-like" => Ok(ModelSpec::deit_b_like()),
        _ => Err(CliError::Config(format!("spec: unknown preset {name:?} (toy, deit-b-like)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(sets: &[&str]) -> Result<RunConfig, CliError> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        RunConfig::load(None, &sets, None)
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let c = load(&["groups=4", "modes.qkv=per-unit", "act_bits=6", "candidates=[2,4]"]).unwrap();
        assert_eq!(c.groups, Some(4));
        assert_eq!(c.modes.qkv, ModeName::PerUnit);
        assert_eq!(c.act_bits, 6);
        assert_eq!(c.candidates, vec![2, 4]);
    }

    #[test]
    fn errors_name_the_field() {
        let msg = |sets: &[&str]| match load(sets) {
            Err(CliError::Config(m)) => m,
            other => panic!("{other:?}"),
        };
        assert!(msg(&["groups=4", "act_bits=9"]).starts_with("act_bits"));
        assert!(msg(&["groups=4", "budget=100"]).starts_with("budget"));
        assert!(load(&[]).unwrap().site_map(&ModelSpec::toy()).is_err());
        assert!(msg(&["groups=4", "bogus=1"]).contains("bogus"));
        assert!(msg(&["groups=4", "modes.fc_input=fancy"]).contains("fancy"));
    }

    #[test]
    fn seed_variable_overrides() {
        let sets = vec!["groups=2".to_string(), "seed=5".to_string()];
        assert_eq!(RunConfig::load(None, &sets, Some("11")).unwrap().seed, 11);
        assert!(RunConfig::load(None, &sets, Some("x")).is_err());
    }

    #[test]
    fn site_map_uses_overrides() {
        let spec = ModelSpec::toy();
        let mut c = load(&["groups=4", "group_sizes.block1.attn=2"]).unwrap();
        let map = c.site_map(&spec).unwrap();
        let i = (0..n_act_sites(&spec)).find(|&i| act_site_name(&spec, i) == "block1.attn").unwrap();
        assert_eq!(map.activations[i].mode, SiteMode::Igq(2));
        assert_eq!(map.activations[0].mode, SiteMode::Igq(4));
        c.group_sizes.insert("block1.query".into(), 2);
        assert!(c.site_map(&spec).is_err());
    }
}
