//! Where quantizers sit in the transformer graph and how each one is configured.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::igq::GroupKind;
use crate::quant::check_bits;

/// Activation sites inside one transformer block, in graph order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockSite {
    QkvIn,
    Query,
    Key,
    Value,
    Attention,
    ProjIn,
    Fc1In,
    Fc2In,
}

impl BlockSite {
    pub const ALL: [BlockSite; 8] = [
        BlockSite::QkvIn,
        BlockSite::Query,
        BlockSite::Key,
        BlockSite::Value,
        BlockSite::Attention,
        BlockSite::ProjIn,
        BlockSite::Fc1In,
        BlockSite::Fc2In,
    ];

    fn suffix(self) -> &'static str {
        match self {
            BlockSite::QkvIn => "qkv_in",
            BlockSite::Query => "query",
            BlockSite::Key => "key",
            BlockSite::Value => "value",
            BlockSite::Attention => "attn",
            BlockSite::ProjIn => "proj_in",
            BlockSite::Fc1In => "fc1_in",
            BlockSite::Fc2In => "fc2_in",
        }
    }

    fn kind(self) -> SiteKind {
        match self {
            BlockSite::QkvIn | BlockSite::ProjIn | BlockSite::Fc1In | BlockSite::Fc2In => SiteKind::FcInput,
            BlockSite::Query => SiteKind::Query,
            BlockSite::Key => SiteKind::Key,
            BlockSite::Value => SiteKind::Value,
            BlockSite::Attention => SiteKind::SoftmaxAttention,
        }
    }
}

/// FC layers inside one block, in graph order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockLinear {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl BlockLinear {
    pub const ALL: [BlockLinear; 4] = [BlockLinear::Qkv, BlockLinear::Proj, BlockLinear::Fc1, BlockLinear::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            BlockLinear::Qkv => "qkv",
            BlockLinear::Proj => "proj",
            BlockLinear::Fc1 => "fc1",
            BlockLinear::Fc2 => "fc2",
        }
    }
}

pub const ACT_SITES_PER_BLOCK: usize = BlockSite::ALL.len();
pub const LINEARS_PER_BLOCK: usize = BlockLinear::ALL.len();

pub fn act_index(block: usize, site: BlockSite) -> usize {
    block * ACT_SITES_PER_BLOCK + BlockSite::ALL.iter().position(|&s| s == site).expect("listed")
}

pub fn head_act_index(spec: &ModelSpec) -> usize {
    spec.depth * ACT_SITES_PER_BLOCK
}

pub fn linear_index(block: usize, linear: BlockLinear) -> usize {
    block * LINEARS_PER_BLOCK + BlockLinear::ALL.iter().position(|&l| l == linear).expect("listed")
}

pub fn head_linear_index(spec: &ModelSpec) -> usize {
    spec.depth * LINEARS_PER_BLOCK
}

pub fn n_act_sites(spec: &ModelSpec) -> usize {
    head_act_index(spec) + 1
}

pub fn n_linears(spec: &ModelSpec) -> usize {
    head_linear_index(spec) + 1
}

/// Block index of an activation site; the classifier input reports `depth`.
pub fn act_block(spec: &ModelSpec, index: usize) -> usize {
    (index / ACT_SITES_PER_BLOCK).min(spec.depth)
}

pub fn act_site_name(spec: &ModelSpec, index: usize) -> String {
    if index == head_act_index(spec) {
        "head_in".to_string()
    } else {
        format!(
            "block{}.{}",
            index / ACT_SITES_PER_BLOCK,
            BlockSite::ALL[index % ACT_SITES_PER_BLOCK].suffix()
        )
    }
}

pub fn act_site_kind(spec: &ModelSpec, index: usize) -> SiteKind {
    if index == head_act_index(spec) {
        SiteKind::FcInput
    } else {
        BlockSite::ALL[index % ACT_SITES_PER_BLOCK].kind()
    }
}

pub fn linear_name(spec: &ModelSpec, index: usize) -> String {
    if index == head_linear_index(spec) {
        "head".to_string()
    } else {
        format!(
            "block{}.{}",
            index / LINEARS_PER_BLOCK,
            BlockLinear::ALL[index % LINEARS_PER_BLOCK].name()
        )
    }
}

/// Activation site that feeds a linear layer.
pub fn linear_input_site(spec: &ModelSpec, linear: usize) -> usize {
    if linear == head_linear_index(spec) {
        return head_act_index(spec);
    }
    let block = linear / LINEARS_PER_BLOCK;
    let site = match BlockLinear::ALL[linear % LINEARS_PER_BLOCK] {
        BlockLinear::Qkv => BlockSite::QkvIn,
        BlockLinear::Proj => BlockSite::ProjIn,
        BlockLinear::Fc1 => BlockSite::Fc1In,
        BlockLinear::Fc2 => BlockSite::Fc2In,
    };
    act_index(block, site)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    FcInput,
    Query,
    Key,
    Value,
    SoftmaxAttention,
    Weight,
}

impl SiteKind {
    /// Sites whose group count is priced by the BOP model and chosen by the allocator.
    pub fn is_allocatable(self) -> bool {
        matches!(self, SiteKind::FcInput | SiteKind::SoftmaxAttention)
    }

    pub fn group_kind(self) -> GroupKind {
        match self {
            SiteKind::SoftmaxAttention => GroupKind::AttentionGrouping,
            _ => GroupKind::ChannelGrouping,
        }
    }
}

/// How an activation site is quantized.
///
/// `PerUnit` is one quantizer per channel (or per attention row), fitted to
/// each instance's own range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteMode {
    Disabled,
    LayerWise,
    PerUnit,
    Consecutive(usize),
    Sorted(usize),
    Igq(usize),
}

impl SiteMode {
    pub fn groups(self) -> Option<usize> {
        match self {
            SiteMode::Consecutive(g) | SiteMode::Sorted(g) | SiteMode::Igq(g) => Some(g),
            SiteMode::LayerWise => Some(1),
            SiteMode::Disabled | SiteMode::PerUnit => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SiteMode::Disabled => "disabled",
            SiteMode::LayerWise => "layer-wise",
            SiteMode::PerUnit => "per-unit",
            SiteMode::Consecutive(_) => "consecutive-group",
            SiteMode::Sorted(_) => "sorted-group",
            SiteMode::Igq(_) => "igq",
        }
    }

    /// Same mode family with a different group count.
    pub fn with_groups(self, groups: usize) -> SiteMode {
        match self {
            SiteMode::Consecutive(_) => SiteMode::Consecutive(groups),
            SiteMode::Sorted(_) => SiteMode::Sorted(groups),
            SiteMode::Igq(_) => SiteMode::Igq(groups),
            other => other,
        }
    }
}

impl fmt::Display for SiteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.groups() {
            Some(g) if !matches!(self, SiteMode::LayerWise) => write!(f, "{}:{g}", self.label()),
            _ => f.write_str(self.label()),
        }
    }
}

impl FromStr for SiteMode {
    type Err = Error;

    /// Accepts `layer-wise`, `channel-wise`, `row-wise`, `per-unit`,
    /// `disabled`, and `igq:G`, `consecutive-group:G`, `sorted-group:G`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, groups) = match s.split_once(':') {
            Some((n, g)) => {
                let g: usize = g
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad group count in mode {s:?}")))?;
                if g == 0 {
                    return Err(Error::InvalidConfig(format!("mode {s:?} needs at least one group")));
                }
                (n, Some(g))
            }
            None => (s, None),
        };
        let mode = match (name, groups) {
            ("disabled" | "fp", None) => SiteMode::Disabled,
            ("layer-wise", None) => SiteMode::LayerWise,
            ("per-unit" | "channel-wise" | "row-wise" | "upper-bound", None) => SiteMode::PerUnit,
            ("igq", Some(g)) => SiteMode::Igq(g),
            ("consecutive-group", Some(g)) => SiteMode::Consecutive(g),
            ("sorted-group", Some(g)) => SiteMode::Sorted(g),
            _ => return Err(Error::InvalidConfig(format!("unknown site mode {s:?}"))),
        };
        Ok(mode)
    }
}

impl Serialize for SiteMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub mode: SiteMode,
    pub bits: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSiteConfig {
    pub enabled: bool,
    pub bits: u8,
    /// Percentile ε in percent.
    pub eps_percentile: f64,
}

/// Per-site quantization settings for a whole model. The positional
/// embedding has no entry: it is never quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationSiteMap {
    pub activations: Vec<SiteConfig>,
    pub weights: Vec<WeightSiteConfig>,
}

/// Modes per site family, used to build a uniform site map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub fc_input: SiteMode,
    pub attention: SiteMode,
    pub qkv: SiteMode,
}

impl ModeSet {
    /// The same mode at every activation site.
    pub fn all(mode: SiteMode) -> Self {
        Self {
            fc_input: mode,
            attention: mode,
            qkv: mode,
        }
    }

    /// Layer-wise query/key/value with the given mode on FC inputs and attentions.
    pub fn grouped(mode: SiteMode) -> Self {
        Self {
            fc_input: mode,
            attention: mode,
            qkv: SiteMode::LayerWise,
        }
    }
}

impl QuantizationSiteMap {
    pub fn uniform(spec: &ModelSpec, modes: ModeSet, act_bits: u8, weight_bits: u8) -> Self {
        let weight_cfg = crate::quant::WeightQuantConfig::for_bits(weight_bits);
        let activations = (0..n_act_sites(spec))
            .map(|i| {
                let mode = match act_site_kind(spec, i) {
                    SiteKind::FcInput => modes.fc_input,
                    SiteKind::SoftmaxAttention => modes.attention,
                    _ => modes.qkv,
                };
                SiteConfig { mode, bits: act_bits }
            })
            .collect();
        let weights = vec![
            WeightSiteConfig {
                enabled: true,
                bits: weight_bits,
                eps_percentile: weight_cfg.eps_percentile,
            };
            n_linears(spec)
        ];
        Self { activations, weights }
    }

    pub fn disabled(spec: &ModelSpec) -> Self {
        Self {
            activations: vec![
                SiteConfig {
                    mode: SiteMode::Disabled,
                    bits: 8,
                };
                n_act_sites(spec)
            ],
            weights: vec![
                WeightSiteConfig {
                    enabled: false,
                    bits: 8,
                    eps_percentile: 1e-3,
                };
                n_linears(spec)
            ],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.activations.len() != n_act_sites(spec) || self.weights.len() != n_linears(spec) {
            return Err(Error::InvalidConfig(format!(
                "site map has {}/{} entries, model needs {}/{}",
                self.activations.len(),
                self.weights.len(),
                n_act_sites(spec),
                n_linears(spec)
            )));
        }
        for (i, s) in self.activations.iter().enumerate() {
            check_bits(s.bits).map_err(|e| Error::InvalidConfig(format!("{}: {e}", act_site_name(spec, i))))?;
        }
        for (i, w) in self.weights.iter().enumerate() {
            check_bits(w.bits).map_err(|e| Error::InvalidConfig(format!("{}: {e}", linear_name(spec, i))))?;
            if !(0.0..50.0).contains(&w.eps_percentile) {
                return Err(Error::InvalidConfig(format!(
                    "{}: percentile ε {} outside [0, 50)",
                    linear_name(spec, i),
                    w.eps_percentile
                )));
            }
        }
        Ok(())
    }

    /// Activation sites whose mode is instance-aware grouping.
    pub fn igq_sites(&self) -> Vec<usize> {
        self.activations
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.mode, SiteMode::Igq(_)))
            .map(|(i, _)| i)
            .collect()
    }
}
