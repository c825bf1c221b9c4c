//! Bit-operation accounting for quantized matrix products and the extra work
//! instance-aware grouping adds: per-unit min/max, quantizer assignment, and
//! the floating-point merge of group partial products.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::sites::{act_index, act_site_name, head_act_index, BlockSite};
use crate::vit::ModelSpec;

/// One 32-bit float multiply.
pub const FLOAT_MUL: u64 = 32 * 32;
/// One 32-bit float add or subtract.
pub const FLOAT_ADD: u64 = 32;
/// `(min − l)² + (max − u)²`: two squares, two subtractions, one add.
pub const CHANNEL_DISTANCE_COST: u64 = 2 * FLOAT_MUL + 3 * FLOAT_ADD;
/// `(max − v)²`: one subtraction, one square.
pub const ROW_DISTANCE_COST: u64 = FLOAT_MUL + FLOAT_ADD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Activation `[N×C]` times weight `[C×D]`, grouped over input channels.
    Fc,
    /// Activation times activation. When grouped, the `N` rows of the left
    /// operand are the grouped units.
    AttentionMatmul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_tokens: u64,
    pub in_channels: u64,
    pub out_channels: u64,
    pub kind: LayerKind,
}

impl LayerShape {
    pub fn fc(n: u64, c: u64, d: u64) -> Self {
        Self {
            n_tokens: n,
            in_channels: c,
            out_channels: d,
            kind: LayerKind::Fc,
        }
    }

    pub fn attention(n: u64, c: u64, d: u64) -> Self {
        Self {
            kind: LayerKind::AttentionMatmul,
            ..Self::fc(n, c, d)
        }
    }

    fn macs(&self) -> u64 {
        self.n_tokens * self.in_channels * self.out_channels
    }
}

/// `N·C·D·b_a·b_w`.
pub fn bop_matmul(shape: LayerShape, b_a: u32, b_w: u32) -> u64 {
    shape.macs() * b_a as u64 * b_w as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Overhead {
    pub minmax: u64,
    pub assign: u64,
    pub fp_sum: u64,
}

/// Extra BOPs of grouping with `groups` quantizers.
///
/// FC input: two comparisons per element for the channel ranges, one
/// distance per (channel, quantizer), and `G − 1` float additions of `N×D`
/// partial products.
/// Attention rows: one comparison per element for the row maxima, one
/// distance per (row, quantizer). Each output row draws on a single group,
/// so no partial products are merged.
pub fn bop_igq_overhead(shape: LayerShape, groups: u64, b_a: u32) -> Overhead {
    let b_a = b_a as u64;
    let (n, c, d) = (shape.n_tokens, shape.in_channels, shape.out_channels);
    match shape.kind {
        LayerKind::Fc => Overhead {
            minmax: n * c * 2 * b_a,
            assign: c * groups * CHANNEL_DISTANCE_COST,
            fp_sum: groups.saturating_sub(1) * n * d * FLOAT_ADD,
        },
        LayerKind::AttentionMatmul => Overhead {
            minmax: n * c * b_a,
            assign: n * groups * ROW_DISTANCE_COST,
            fp_sum: 0,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBops {
    pub name: String,
    pub shape: LayerShape,
    /// Activation site whose group count drives the overhead, if grouped.
    pub group_site: Option<String>,
    pub groups: Option<u64>,
    pub model: u64,
    pub minmax: u64,
    pub assign: u64,
    pub fp_sum: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BopReport {
    pub layers: Vec<LayerBops>,
    pub model: u64,
    pub minmax: u64,
    pub assign: u64,
    pub fp_sum: u64,
    pub total: u64,
}

impl BopReport {
    pub fn overhead(&self) -> u64 {
        self.minmax + self.assign + self.fp_sum
    }

    /// Overhead relative to the plain quantized matmuls.
    pub fn overhead_fraction(&self) -> f64 {
        self.overhead() as f64 / self.model as f64
    }
}

/// Every quantized matmul of a model with the site that groups its left
/// operand. Attention `QKᵀ` is ungrouped: queries and keys are layer-wise.
pub fn layer_table(spec: &ModelSpec) -> Vec<(String, LayerShape, Option<String>)> {
    let (n, d, h) = (spec.n_tokens as u64, spec.dim as u64, spec.heads as u64);
    let (hidden, dh) = (spec.hidden() as u64, spec.head_dim() as u64);
    let site = |b: usize, s: BlockSite| Some(act_site_name(spec, act_index(b, s)));
    let mut out = Vec::new();
    for b in 0..spec.depth {
        out.push((format!("block{b}.qkv"), LayerShape::fc(n, d, 3 * d), site(b, BlockSite::QkvIn)));
        out.push((format!("block{b}.q_k"), LayerShape::attention(h * n, dh, n), None));
        out.push((format!("block{b}.attn_v"), LayerShape::attention(h * n, n, dh), site(b, BlockSite::Attention)));
        out.push((format!("block{b}.proj"), LayerShape::fc(n, d, d), site(b, BlockSite::ProjIn)));
        out.push((format!("block{b}.fc1"), LayerShape::fc(n, d, hidden), site(b, BlockSite::Fc1In)));
        out.push((format!("block{b}.fc2"), LayerShape::fc(n, hidden, d), site(b, BlockSite::Fc2In)));
    }
    out.push((
        "head".into(),
        LayerShape::fc(n, d, spec.n_classes as u64),
        Some(act_site_name(spec, head_act_index(spec))),
    ));
    out
}

/// Names of the sites whose group count enters the BOP count.
pub fn grouped_sites(spec: &ModelSpec) -> Vec<String> {
    layer_table(spec).into_iter().filter_map(|(_, _, s)| s).collect()
}

fn check_bits(bits: u32) -> Result<()> {
    crate::quant::check_bits(u8::try_from(bits).unwrap_or(0))
}

/// BOPs with a group count for every grouped site; `None` in place of the
/// map counts plain layer-wise quantization with no grouping overhead.
pub fn model_bops(
    spec: &ModelSpec,
    groups: Option<&BTreeMap<String, usize>>,
    b_a: u32,
    b_w: u32,
) -> Result<BopReport> {
    if let Some(map) = groups {
        if let Some(s) = grouped_sites(spec).into_iter().find(|s| !map.contains_key(s)) {
            return Err(Error::MissingGroupSize(s));
        }
    }
    bops_with(spec, groups, b_a, b_w)
}

/// Like [`model_bops`], but grouped sites absent from `groups` are counted
/// as static quantizers with no grouping overhead.
pub fn partial_bops(spec: &ModelSpec, groups: &BTreeMap<String, usize>, b_a: u32, b_w: u32) -> Result<BopReport> {
    let known = grouped_sites(spec);
    if let Some(s) = groups.keys().find(|s| !known.contains(s)) {
        return Err(Error::InvalidConfig(format!("{s} is not a grouped site")));
    }
    bops_with(spec, Some(groups), b_a, b_w)
}

fn bops_with(spec: &ModelSpec, groups: Option<&BTreeMap<String, usize>>, b_a: u32, b_w: u32) -> Result<BopReport> {
    spec.validate()?;
    check_bits(b_a)?;
    check_bits(b_w)?;
    let mut layers = Vec::new();
    for (name, shape, site) in layer_table(spec) {
        let bits_right = match shape.kind {
            LayerKind::Fc => b_w,
            LayerKind::AttentionMatmul => b_a,
        };
        let model = bop_matmul(shape, b_a, bits_right);
        let (g, over) = match (&site, groups) {
            (Some(s), Some(map)) if map.contains_key(s) => {
                let g = map[s];
                if g == 0 {
                    return Err(Error::InvalidConfig(format!("{s}: group size must be at least 1")));
                }
                (Some(g as u64), bop_igq_overhead(shape, g as u64, b_a))
            }
            _ => (None, Overhead::default()),
        };
        layers.push(LayerBops {
            name,
            shape,
            group_site: site,
            groups: g,
            model,
            minmax: over.minmax,
            assign: over.assign,
            fp_sum: over.fp_sum,
            total: model + over.minmax + over.assign + over.fp_sum,
        });
    }
    let sum = |f: fn(&LayerBops) -> u64| layers.iter().map(f).sum::<u64>();
    Ok(BopReport {
        model: sum(|l| l.model),
        minmax: sum(|l| l.minmax),
        assign: sum(|l| l.assign),
        fp_sum: sum(|l| l.fp_sum),
        total: sum(|l| l.total),
        layers,
    })
}

/// The same group count at every grouped site.
pub fn uniform_groups(spec: &ModelSpec, groups: usize) -> BTreeMap<String, usize> {
    grouped_sites(spec).into_iter().map(|s| (s, groups)).collect()
}
