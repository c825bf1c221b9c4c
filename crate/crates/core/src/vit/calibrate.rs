//! Calibration of every quantization site and the quantized forward pass.

use serde::{Deserialize, Serialize};

use super::sites::{
    act_site_kind, act_site_name, linear_input_site, linear_name, n_act_sites, QuantizationSiteMap, SiteKind,
    SiteMode,
};
use super::{Hooks, ModelSpec, VitModel};
use crate::error::{Error, Result};
use crate::igq::{
    channel_stats, groupwise_matmul_codes, per_unit_quantizers, quantize_columns, row_maxima,
    update_bounds, ChannelStats, EmState, GroupAssignment, GroupKind, GroupQuantizers, PreparedWeight, RangePoint,
};
use crate::quant::{quantize_weight_per_column, QuantizedWeight, WeightQuantConfig};
use crate::tensor::{matmul, Tensor};

/// Calibrated quantizer at one activation site.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteQuantizer {
    Disabled,
    /// Every channel or row quantized with its own per-instance range.
    PerUnit { kind: GroupKind, bits: u8 },
    /// `G` fixed quantizers. Membership is either re-derived per instance
    /// (`fixed == None`) or frozen at calibration.
    Grouped {
        quantizers: GroupQuantizers,
        fixed: Option<GroupAssignment>,
    },
}

impl SiteQuantizer {
    pub fn groups(&self) -> Option<usize> {
        match self {
            SiteQuantizer::Grouped { quantizers, .. } => Some(quantizers.len()),
            _ => None,
        }
    }

    /// Quantizers and per-unit membership for one instance.
    /// `points` are the instance's unit ranges, `(0, max)` for attention rows.
    fn resolve(&self, points: &[RangePoint]) -> Result<Option<(GroupQuantizers, GroupAssignment)>> {
        match self {
            SiteQuantizer::Disabled => Ok(None),
            SiteQuantizer::PerUnit { kind, bits } => {
                let q = per_unit_quantizers(points, *kind, *bits)?;
                let assign = GroupAssignment {
                    indices: (0..points.len()).collect(),
                };
                Ok(Some((q, assign)))
            }
            SiteQuantizer::Grouped { quantizers, fixed } => {
                let assign = match fixed {
                    Some(a) => {
                        if a.len() != points.len() {
                            return Err(Error::shape(
                                "fixed group membership",
                                format!("{} entries for {} units", a.len(), points.len()),
                            ));
                        }
                        a.clone()
                    }
                    None => GroupAssignment {
                        indices: points.iter().map(|&p| quantizers.nearest(p)).collect(),
                    },
                };
                Ok(Some((quantizers.clone(), assign)))
            }
        }
    }
}

/// Per-column quantized weight plus the forms the forward pass consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedWeight {
    pub quantized: QuantizedWeight,
    pub prepared: PreparedWeight,
    pub dequantized: Tensor,
}

impl CalibratedWeight {
    pub fn new(w: &Tensor, cfg: &WeightQuantConfig) -> Result<Self> {
        let quantized = quantize_weight_per_column(w, cfg)?;
        let prepared = PreparedWeight::new(&quantized.codes, &quantized.qparams)?;
        let dequantized = quantized.dequantize();
        Ok(Self {
            quantized,
            prepared,
            dequantized,
        })
    }
}

/// A model with every site calibrated.
#[derive(Debug, Clone)]
pub struct CalibratedModel {
    pub model: VitModel,
    pub sites: QuantizationSiteMap,
    pub activations: Vec<SiteQuantizer>,
    pub weights: Vec<Option<CalibratedWeight>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tol must be non-negative".into()));
        }
        Ok(())
    }

    /// EM seed for one site, so sites do not share seeding draws.
    pub fn site_seed(&self, site: usize) -> u64 {
        self.seed ^ (site as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub name: String,
    pub kind: SiteKind,
    pub mode: SiteMode,
    pub bits: u8,
    pub units: usize,
    pub groups: Option<usize>,
    pub em_trace: Vec<f64>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub name: String,
    pub bits: Option<u8>,
    pub eps_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub sites: Vec<SiteReport>,
    pub weights: Vec<WeightReport>,
}

/// Per-instance unit ranges observed at every activation site during
/// full-precision forwards, `points[site][sample][unit]`.
#[derive(Debug, Clone)]
pub struct SiteStats {
    pub points: Vec<Vec<Vec<RangePoint>>>,
}

impl SiteStats {
    pub fn units(&self, site: usize) -> usize {
        self.points[site].first().map_or(0, |s| s.len())
    }

    /// All instances' ranges pooled into one calibration set.
    pub fn pooled(&self, site: usize) -> Vec<RangePoint> {
        self.points[site].iter().flatten().copied().collect()
    }
}

fn unit_points(x: &Tensor) -> Result<Vec<RangePoint>> {
    Ok(channel_stats(x)?.points())
}

/// Rows of an `[H×N×N]` attention as `(0, row max)` points.
fn row_points(a: &Tensor) -> Vec<RangePoint> {
    row_maxima(a).into_iter().map(|m| RangePoint::new(0.0, m)).collect()
}

struct StatsHooks {
    current: Vec<Vec<RangePoint>>,
}

impl Hooks for StatsHooks {
    fn linear(&mut self, site: usize, _linear: usize, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.current[site] = unit_points(x)?;
        matmul(x, w)
    }

    fn activation(&mut self, site: usize, x: Tensor) -> Result<Tensor> {
        self.current[site] = unit_points(&x)?;
        Ok(x)
    }

    fn attention(&mut self, site: usize, a: Tensor) -> Result<Tensor> {
        self.current[site] = row_points(&a);
        Ok(a)
    }
}

pub fn collect_stats(model: &VitModel, samples: &[Tensor]) -> Result<SiteStats> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("calibration batch is empty".into()));
    }
    let n_sites = n_act_sites(&model.spec);
    let mut points = vec![Vec::with_capacity(samples.len()); n_sites];
    for x in samples {
        let mut hooks = StatsHooks {
            current: vec![Vec::new(); n_sites],
        };
        model.forward_with(x, &mut hooks)?;
        for (site, p) in hooks.current.into_iter().enumerate() {
            points[site].push(p);
        }
    }
    Ok(SiteStats { points })
}

/// Bounds for fixed membership: every group takes the mean range of its
/// members over all calibration instances.
fn fixed_group_quantizers(
    stats: &[Vec<RangePoint>],
    membership: &GroupAssignment,
    groups: usize,
    kind: GroupKind,
    bits: u8,
) -> Result<GroupQuantizers> {
    let mut pooled = ChannelStats {
        mins: Vec::new(),
        maxs: Vec::new(),
    };
    let mut indices = Vec::new();
    for inst in stats {
        for (u, p) in inst.iter().enumerate() {
            pooled.mins.push(p.min);
            pooled.maxs.push(p.max);
            indices.push(membership.indices[u]);
        }
    }
    let mut bounds = update_bounds(&pooled, &GroupAssignment { indices }, groups)?;
    if kind == GroupKind::AttentionGrouping {
        bounds.iter_mut().for_each(|b| b.lower = 0.0);
    }
    GroupQuantizers::from_bounds(kind, bounds, bits)
}

/// Unit `u` goes to group `⌊u·G/units⌋` of the given order.
fn chunked(order: &[usize], groups: usize) -> GroupAssignment {
    let units = order.len();
    let mut indices = vec![0; units];
    for (rank, &u) in order.iter().enumerate() {
        indices[u] = rank * groups / units;
    }
    GroupAssignment { indices }
}

/// Calibration output for one site.
pub struct SiteCalibration {
    pub quantizer: SiteQuantizer,
    pub em_trace: Vec<f64>,
    pub converged: Option<bool>,
}

pub fn calibrate_site(
    spec: &ModelSpec,
    site: usize,
    mode: SiteMode,
    bits: u8,
    stats: &SiteStats,
    cfg: &CalibrationConfig,
) -> Result<SiteCalibration> {
    let kind = act_site_kind(spec, site).group_kind();
    let units = stats.units(site);
    let per_site = &stats.points[site];
    let none = |quantizer| SiteCalibration {
        quantizer,
        em_trace: Vec::new(),
        converged: None,
    };
    let groups = mode.groups().unwrap_or(1);
    if groups > units && !matches!(mode, SiteMode::Disabled | SiteMode::PerUnit) {
        return Err(Error::InvalidConfig(format!(
            "{}: {groups} groups for {units} units",
            act_site_name(spec, site)
        )));
    }
    match mode {
        SiteMode::Disabled => Ok(none(SiteQuantizer::Disabled)),
        SiteMode::PerUnit => {
            crate::quant::check_bits(bits)?;
            Ok(none(SiteQuantizer::PerUnit { kind, bits }))
        }
        SiteMode::LayerWise | SiteMode::Igq(_) => {
            let mut em = EmState::new(&stats.pooled(site), groups, cfg.site_seed(site), cfg.tol)?;
            em.run(cfg.max_iter);
            Ok(SiteCalibration {
                quantizer: SiteQuantizer::Grouped {
                    quantizers: em.quantizers(kind, bits)?,
                    fixed: None,
                },
                em_trace: em.trace().to_vec(),
                converged: Some(em.is_converged()),
            })
        }
        SiteMode::Consecutive(g) => {
            let order: Vec<usize> = (0..units).collect();
            let membership = chunked(&order, g);
            let quantizers = fixed_group_quantizers(per_site, &membership, g, kind, bits)?;
            Ok(none(SiteQuantizer::Grouped {
                quantizers,
                fixed: Some(membership),
            }))
        }
        SiteMode::Sorted(g) => {
            let n = per_site.len() as f64;
            let mean_range: Vec<f64> = (0..units)
                .map(|u| per_site.iter().map(|inst| (inst[u].max - inst[u].min) as f64).sum::<f64>() / n)
                .collect();
            let mut order: Vec<usize> = (0..units).collect();
            order.sort_by(|&a, &b| mean_range[a].total_cmp(&mean_range[b]).then(a.cmp(&b)));
            let membership = chunked(&order, g);
            let quantizers = fixed_group_quantizers(per_site, &membership, g, kind, bits)?;
            Ok(none(SiteQuantizer::Grouped {
                quantizers,
                fixed: Some(membership),
            }))
        }
    }
}

/// Weight percentile calibration and activation EM for every site.
pub fn calibrate_model(
    model: &VitModel,
    samples: &[Tensor],
    sites: &QuantizationSiteMap,
    cfg: &CalibrationConfig,
) -> Result<(CalibratedModel, CalibrationReport)> {
    sites.validate(&model.spec)?;
    cfg.validate()?;
    let stats = collect_stats(model, samples)?;
    calibrate_with_stats(model, &stats, sites, cfg)
}

pub fn calibrate_with_stats(
    model: &VitModel,
    stats: &SiteStats,
    sites: &QuantizationSiteMap,
    cfg: &CalibrationConfig,
) -> Result<(CalibratedModel, CalibrationReport)> {
    sites.validate(&model.spec)?;
    let spec = &model.spec;
    let mut activations = Vec::with_capacity(sites.activations.len());
    let mut site_reports = Vec::with_capacity(sites.activations.len());
    for (i, sc) in sites.activations.iter().enumerate() {
        let cal = calibrate_site(spec, i, sc.mode, sc.bits, stats, cfg)?;
        site_reports.push(SiteReport {
            name: act_site_name(spec, i),
            kind: act_site_kind(spec, i),
            mode: sc.mode,
            bits: sc.bits,
            units: stats.units(i),
            groups: cal.quantizer.groups(),
            em_trace: cal.em_trace,
            converged: cal.converged,
        });
        activations.push(cal.quantizer);
    }
    let mut weights = Vec::with_capacity(sites.weights.len());
    let mut weight_reports = Vec::with_capacity(sites.weights.len());
    for (i, wc) in sites.weights.iter().enumerate() {
        let w = if wc.enabled {
            let cfg = WeightQuantConfig {
                eps_percentile: wc.eps_percentile,
                bits: wc.bits,
            };
            Some(CalibratedWeight::new(model.linear_weight(i).0, &cfg)?)
        } else {
            None
        };
        weight_reports.push(WeightReport {
            name: linear_name(spec, i),
            bits: wc.enabled.then_some(wc.bits),
            eps_percentile: wc.eps_percentile,
        });
        weights.push(w);
    }
    let report = CalibrationReport {
        samples: stats.points.first().map_or(0, |p| p.len()),
        sites: site_reports,
        weights: weight_reports,
    };
    let cm = CalibratedModel {
        model: model.clone(),
        sites: sites.clone(),
        activations,
        weights,
    };
    Ok((cm, report))
}

fn fake_quantize_units(x: &mut [f32], unit_len: usize, per_row: bool, q: &GroupQuantizers, a: &GroupAssignment) {
    if per_row {
        for (r, row) in x.chunks_exact_mut(unit_len).enumerate() {
            let qp = q.qparams[a.indices[r]];
            row.iter_mut().for_each(|v| *v = qp.fake_quantize(*v));
        }
    } else {
        for (i, v) in x.iter_mut().enumerate() {
            *v = q.qparams[a.indices[i % unit_len]].fake_quantize(*v);
        }
    }
}

/// Hooks applying the calibrated quantizers, with an optional replacement
/// quantizer at one site.
pub struct QuantHooks<'a> {
    cm: &'a CalibratedModel,
    over: Option<(usize, &'a SiteQuantizer)>,
    /// When set, the residual stream entering each block is recorded.
    pub block_inputs: Option<Vec<Tensor>>,
}

impl<'a> QuantHooks<'a> {
    pub fn new(cm: &'a CalibratedModel, over: Option<(usize, &'a SiteQuantizer)>) -> Self {
        Self {
            cm,
            over,
            block_inputs: None,
        }
    }

    fn site(&self, site: usize) -> &'a SiteQuantizer {
        match self.over {
            Some((s, q)) if s == site => q,
            _ => &self.cm.activations[site],
        }
    }
}

impl Hooks for QuantHooks<'_> {
    fn linear(&mut self, site: usize, linear: usize, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let act = self.site(site);
        let weight = self.cm.weights[linear].as_ref();
        debug_assert_eq!(site, linear_input_site(&self.cm.model.spec, linear));
        let resolved = match act {
            SiteQuantizer::Disabled => None,
            other => other.resolve(&unit_points(x)?)?,
        };
        match (resolved, weight) {
            (None, None) => matmul(x, w),
            (None, Some(cw)) => matmul(x, &cw.dequantized),
            (Some((q, a)), Some(cw)) => {
                let codes = quantize_columns(x, &q.qparams, &a)?;
                groupwise_matmul_codes(&codes, &q.qparams, &a, &cw.prepared)
            }
            (Some((q, a)), None) => {
                let mut xq = x.clone();
                let c = x.row_len();
                fake_quantize_units(xq.data_mut(), c, false, &q, &a);
                matmul(&xq, w)
            }
        }
    }

    fn activation(&mut self, site: usize, mut x: Tensor) -> Result<Tensor> {
        let act = self.site(site);
        if let SiteQuantizer::Disabled = act {
            return Ok(x);
        }
        if let Some((q, a)) = act.resolve(&unit_points(&x)?)? {
            let c = x.row_len();
            fake_quantize_units(x.data_mut(), c, false, &q, &a);
        }
        Ok(x)
    }

    fn attention(&mut self, site: usize, mut a: Tensor) -> Result<Tensor> {
        let act = self.site(site);
        if let SiteQuantizer::Disabled = act {
            return Ok(a);
        }
        if let Some((q, assign)) = act.resolve(&row_points(&a))? {
            let n = a.row_len();
            fake_quantize_units(a.data_mut(), n, true, &q, &assign);
        }
        Ok(a)
    }

    fn block_input(&mut self, block: usize, h: &Tensor) {
        if let Some(v) = self.block_inputs.as_mut() {
            if v.len() == block {
                v.push(h.clone());
            }
        }
    }
}

impl CalibratedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    pub fn forward_quant(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.model.forward_with(x, &mut QuantHooks::new(self, None))
    }

    /// Quantized forward with `site` using `quantizer` instead of its own.
    pub fn forward_with_site(&self, x: &Tensor, site: usize, quantizer: &SiteQuantizer) -> Result<Vec<f32>> {
        self.model.forward_with(x, &mut QuantHooks::new(self, Some((site, quantizer))))
    }

    /// Quantized forward that also returns the residual stream entering every
    /// block and the classifier.
    pub fn forward_recording(&self, x: &Tensor) -> Result<(Vec<f32>, Vec<Tensor>)> {
        let mut hooks = QuantHooks::new(self, None);
        hooks.block_inputs = Some(Vec::new());
        let p = self.model.forward_with(x, &mut hooks)?;
        Ok((p, hooks.block_inputs.unwrap_or_default()))
    }

    /// Resumes a quantized forward at `block` from a recorded residual stream.
    pub fn forward_from(
        &self,
        block: usize,
        h: Tensor,
        over: Option<(usize, &SiteQuantizer)>,
    ) -> Result<Vec<f32>> {
        self.model.forward_from(block, h, &mut QuantHooks::new(self, over))
    }

    /// Checks that every site enabled in the site map carries a quantizer.
    pub fn check_calibrated(&self) -> Result<()> {
        for (i, (cfg, q)) in self.sites.activations.iter().zip(&self.activations).enumerate() {
            if cfg.mode != SiteMode::Disabled && *q == SiteQuantizer::Disabled {
                return Err(Error::UncalibratedSite(act_site_name(self.spec(), i)));
            }
        }
        for (i, (cfg, w)) in self.sites.weights.iter().zip(&self.weights).enumerate() {
            if cfg.enabled && w.is_none() {
                return Err(Error::UncalibratedSite(linear_name(self.spec(), i)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::sites::{ModeSet, SiteConfig};
    use crate::vit::synthetic_samples;

    fn tiny() -> ModelSpec {
        ModelSpec {
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            n_tokens: 8,
            n_classes: 5,
        }
    }

    fn setup(seed: u64) -> (VitModel, Vec<Tensor>) {
        let m = VitModel::synthetic(tiny(), seed).unwrap();
        let s = synthetic_samples(&m.spec, 8, seed + 100);
        (m, s)
    }

    #[test]
    fn disabled_map_is_bit_identical_to_fp() {
        let (m, s) = setup(1);
        let map = QuantizationSiteMap::disabled(&m.spec);
        let (cm, _) = calibrate_model(&m, &s, &map, &CalibrationConfig::default()).unwrap();
        for x in &s {
            assert_eq!(cm.forward_quant(x).unwrap(), m.forward_fp(x).unwrap());
        }
    }

    #[test]
    fn eight_bit_per_unit_is_close_to_fp() {
        let (m, s) = setup(2);
        let modes = ModeSet {
            fc_input: SiteMode::PerUnit,
            attention: SiteMode::PerUnit,
            qkv: SiteMode::PerUnit,
        };
        let map = QuantizationSiteMap::uniform(&m.spec, modes, 8, 8);
        let (cm, _) = calibrate_model(&m, &s, &map, &CalibrationConfig::default()).unwrap();
        for x in &s {
            let p = m.forward_fp(x).unwrap();
            let q = cm.forward_quant(x).unwrap();
            let tv: f32 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f32>() * 0.5;
            assert!(tv < 0.02, "total variation {tv}");
        }
    }

    #[test]
    fn report_lists_requested_groups() {
        let (m, s) = setup(3);
        let map = QuantizationSiteMap::uniform(&m.spec, ModeSet::grouped(SiteMode::Igq(4)), 4, 4);
        let (_, report) = calibrate_model(&m, &s, &map, &CalibrationConfig::default()).unwrap();
        for r in &report.sites {
            match r.kind {
                SiteKind::FcInput | SiteKind::SoftmaxAttention => assert_eq!(r.groups, Some(4), "{}", r.name),
                _ => assert_eq!(r.groups, Some(1), "{}", r.name),
            }
            assert!(!r.em_trace.is_empty());
        }
    }

    #[test]
    fn fixed_membership_never_moves() {
        let (m, s) = setup(4);
        let spec = m.spec;
        let stats = collect_stats(&m, &s).unwrap();
        let site = 0;
        let cal = calibrate_site(&spec, site, SiteMode::Sorted(4), 4, &stats, &CalibrationConfig::default()).unwrap();
        let SiteQuantizer::Grouped { fixed: Some(a), .. } = &cal.quantizer else {
            panic!("sorted grouping must freeze membership");
        };
        for inst in &stats.points[site] {
            let (_, got) = cal.quantizer.resolve(inst).unwrap().unwrap();
            assert_eq!(&got, a);
        }
        assert_eq!(a.group_sizes(4), vec![4, 4, 4, 4]);
    }

    #[test]
    fn uncalibrated_site_is_reported() {
        let (m, s) = setup(5);
        let map = QuantizationSiteMap::uniform(&m.spec, ModeSet::grouped(SiteMode::Igq(2)), 4, 4);
        let (mut cm, _) = calibrate_model(&m, &s, &map, &CalibrationConfig::default()).unwrap();
        cm.check_calibrated().unwrap();
        cm.activations[3] = SiteQuantizer::Disabled;
        assert!(matches!(cm.check_calibrated(), Err(Error::UncalibratedSite(n)) if n == "block0.value"));
    }

    #[test]
    fn resumed_forward_matches_full_forward() {
        let (m, s) = setup(6);
        let map = QuantizationSiteMap::uniform(&m.spec, ModeSet::grouped(SiteMode::Igq(2)), 4, 4);
        let (cm, _) = calibrate_model(&m, &s, &map, &CalibrationConfig::default()).unwrap();
        let (p, inputs) = cm.forward_recording(&s[0]).unwrap();
        assert_eq!(inputs.len(), m.spec.depth + 1);
        for (b, h) in inputs.into_iter().enumerate() {
            assert_eq!(cm.forward_from(b, h, None).unwrap(), p);
        }
    }

    #[test]
    fn too_many_groups_is_a_config_error() {
        let (m, s) = setup(7);
        let mut map = QuantizationSiteMap::disabled(&m.spec);
        map.activations[0] = SiteConfig {
            mode: SiteMode::Igq(17),
            bits: 4,
        };
        assert!(matches!(
            calibrate_model(&m, &s, &map, &CalibrationConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (m, _) = setup(8);
        let map = QuantizationSiteMap::disabled(&m.spec);
        assert!(calibrate_model(&m, &[], &map, &CalibrationConfig::default()).is_err());
    }
}
