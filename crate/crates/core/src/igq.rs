//! Instance-aware group quantization.
//!
//! Channels of an activation matrix (or rows of a softmax attention) are
//! described by their dynamic range `(min, max)` for one input instance.
//! Calibration clusters those ranges into `G` quantizers with an EM loop:
//! each range goes to the quantizer whose bounds are nearest, then every
//! quantizer's bounds move to the mean of its members. At inference the
//! bounds stay fixed and every instance re-assigns its own channels, which
//! is what lets the grouping follow per-instance range shifts.
//!
//! The grouped matrix product keeps one integer accumulator per group and
//! merges groups in floating point after scaling, carrying zero-points on
//! both operands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{derive_qparams, QParams, QuantizerBounds};
use crate::tensor::{IntTensor, Tensor};

/// Dynamic range of one channel or attention row for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangePoint {
    pub min: f32,
    pub max: f32,
}

impl RangePoint {
    pub fn new(min: f32, max: f32) -> Self {
        Self { min, max }
    }
}

/// Column-wise minima and maxima of an `[N×C]` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mins: Vec<f32>,
    pub maxs: Vec<f32>,
}

impl ChannelStats {
    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }

    pub fn point(&self, c: usize) -> RangePoint {
        RangePoint::new(self.mins[c], self.maxs[c])
    }

    pub fn points(&self) -> Vec<RangePoint> {
        (0..self.len()).map(|c| self.point(c)).collect()
    }
}

pub fn channel_stats(x: &Tensor) -> Result<ChannelStats> {
    let (_, c) = x.dims2()?;
    let mut mins = vec![f32::INFINITY; c];
    let mut maxs = vec![f32::NEG_INFINITY; c];
    for row in x.rows() {
        for ((lo, hi), &v) in mins.iter_mut().zip(maxs.iter_mut()).zip(row) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }
    Ok(ChannelStats { mins, maxs })
}

/// Maximum of every row of an attention tensor (`[.., N]`).
pub fn row_maxima(a: &Tensor) -> Vec<f32> {
    a.rows()
        .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect()
}

/// Squared distance between a channel range and a quantizer range:
/// `(min − l)² + (max − u)²`.
#[inline]
pub fn channel_distance(stat: RangePoint, bounds: QuantizerBounds) -> f64 {
    let dl = stat.min as f64 - bounds.lower as f64;
    let du = stat.max as f64 - bounds.upper as f64;
    dl * dl + du * du
}

/// `(row_max − v)²`; attention quantizers all start at zero.
#[inline]
pub fn attention_row_distance(row_max: f32, upper: f32) -> f64 {
    let d = row_max as f64 - upper as f64;
    d * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    ChannelGrouping,
    AttentionGrouping,
}

/// A calibrated set of `G` quantizers sharing one bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupQuantizers {
    pub kind: GroupKind,
    pub bits: u8,
    pub bounds: Vec<QuantizerBounds>,
    pub qparams: Vec<QParams>,
}

impl GroupQuantizers {
    /// Derives parameters for every bound, widening zero-width ranges.
    pub fn from_bounds(kind: GroupKind, bounds: Vec<QuantizerBounds>, bits: u8) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidConfig("a quantizer set needs at least one group".into()));
        }
        let bounds: Vec<_> = bounds.into_iter().map(widen_if_degenerate).collect();
        if kind == GroupKind::AttentionGrouping && bounds.iter().any(|b| b.lower != 0.0) {
            return Err(Error::InvalidConfig(
                "attention quantizers must have a zero lower bound".into(),
            ));
        }
        let qparams = bounds
            .iter()
            .map(|&b| derive_qparams(include_zero(b), bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            bits,
            bounds,
            qparams,
        })
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    /// Nearest quantizer for a channel range, lowest index on ties.
    pub fn nearest(&self, stat: RangePoint) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &b) in self.bounds.iter().enumerate() {
            let d = match self.kind {
                GroupKind::ChannelGrouping => channel_distance(stat, b),
                GroupKind::AttentionGrouping => attention_row_distance(stat.max, b.upper),
            };
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Extends a range to contain zero. With a clipped zero-point, a range lying
/// wholly on one side of zero would otherwise be represented as `[0, u − l]`.
pub fn include_zero(b: QuantizerBounds) -> QuantizerBounds {
    QuantizerBounds::new(b.lower.min(0.0), b.upper.max(0.0))
}

/// Zero-width ranges get `u = l + max(1e-8, 1e-6·|l|)`.
pub fn widen_if_degenerate(b: QuantizerBounds) -> QuantizerBounds {
    if b.upper > b.lower {
        return b;
    }
    let width = (1e-6 * b.lower.abs()).max(1e-8);
    let upper = (b.lower + width).max(b.lower.next_up());
    QuantizerBounds::new(b.lower, upper)
}

/// Group index per channel (or per attention row).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub indices: Vec<usize>,
}

impl GroupAssignment {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn group_sizes(&self, groups: usize) -> Vec<usize> {
        let mut sizes = vec![0; groups];
        for &g in &self.indices {
            sizes[g] += 1;
        }
        sizes
    }
}

pub fn assign_groups(stats: &ChannelStats, q: &GroupQuantizers) -> Result<GroupAssignment> {
    if q.kind != GroupKind::ChannelGrouping {
        return Err(Error::InvalidConfig(
            "channel assignment needs channel-grouping quantizers".into(),
        ));
    }
    Ok(GroupAssignment {
        indices: (0..stats.len()).map(|c| q.nearest(stats.point(c))).collect(),
    })
}

pub fn assign_rows(row_maxes: &[f32], q: &GroupQuantizers) -> GroupAssignment {
    GroupAssignment {
        indices: row_maxes
            .iter()
            .map(|&m| q.nearest(RangePoint::new(0.0, m)))
            .collect(),
    }
}

/// Closed-form M-step: every non-empty group takes the mean of its members'
/// minima and maxima. An empty group is re-seeded with the member that sits
/// farthest from its own group.
pub fn update_bounds(
    stats: &ChannelStats,
    assign: &GroupAssignment,
    groups: usize,
) -> Result<Vec<QuantizerBounds>> {
    if assign.len() != stats.len() {
        return Err(Error::shape(
            "update_bounds",
            format!("{} assignments for {} channels", assign.len(), stats.len()),
        ));
    }
    if let Some(&bad) = assign.indices.iter().find(|&&g| g >= groups) {
        return Err(Error::MissingGroupParams {
            group: bad,
            available: groups,
        });
    }
    let points: Vec<(f64, f64)> = stats
        .points()
        .iter()
        .map(|p| (p.min as f64, p.max as f64))
        .collect();
    let mut centers = vec![(0.0, 0.0); groups];
    m_step(&points, &assign.indices, &mut centers);
    Ok(centers
        .into_iter()
        .map(|(l, u)| QuantizerBounds::new(l as f32, u as f32))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub groups: usize,
    pub bits: u8,
    pub max_iter: usize,
    pub seed: u64,
    /// Relative objective improvement below which the loop stops.
    pub tol: f64,
}

impl CalibConfig {
    pub fn new(groups: usize, bits: u8) -> Self {
        Self {
            groups,
            bits,
            max_iter: 300,
            seed: 0,
            tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidConfig("group count must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("EM needs at least one iteration".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("EM tolerance must be non-negative".into()));
        }
        crate::quant::check_bits(self.bits)
    }
}

/// Resumable EM state over a fixed set of range points.
///
/// Points are kept sorted by value internally so the result does not depend
/// on the order channels were presented in.
#[derive(Debug, Clone)]
pub struct EmState {
    points: Vec<(f64, f64)>,
    order: Vec<usize>,
    centers: Vec<(f64, f64)>,
    assign: Vec<usize>,
    trace: Vec<f64>,
    tol: f64,
    converged: bool,
}

impl EmState {
    pub fn new(points: &[RangePoint], groups: usize, seed: u64, tol: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("EM needs at least one point".into()));
        }
        if groups == 0 {
            return Err(Error::InvalidConfig("group count must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a]
                .min
                .total_cmp(&points[b].min)
                .then(points[a].max.total_cmp(&points[b].max))
        });
        let sorted: Vec<(f64, f64)> = order
            .iter()
            .map(|&i| (points[i].min as f64, points[i].max as f64))
            .collect();
        let centers = farthest_point_seeds(&sorted, groups, seed);
        Ok(Self {
            points: sorted,
            order,
            centers,
            assign: Vec::new(),
            trace: Vec::new(),
            tol,
            converged: false,
        })
    }

    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Objective after every completed iteration.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn objective(&self) -> Option<f64> {
        self.trace.last().copied()
    }

    /// One assignment + bound-update iteration. Returns the objective.
    pub fn step(&mut self) -> f64 {
        if self.converged {
            return self.objective().unwrap_or(0.0);
        }
        let mut assign = Vec::with_capacity(self.points.len());
        for &p in &self.points {
            assign.push(nearest_center(p, &self.centers).0);
        }
        let unchanged = assign == self.assign;
        self.assign = assign;
        let reseeded = m_step(&self.points, &self.assign, &mut self.centers);
        let obj = objective(&self.points, &self.assign, &self.centers);
        if let Some(prev) = self.objective() {
            let rel = if prev > 0.0 { (prev - obj) / prev } else { 0.0 };
            if (unchanged && !reseeded) || rel < self.tol {
                self.converged = true;
            }
        }
        if obj == 0.0 {
            self.converged = true;
        }
        self.trace.push(obj);
        obj
    }

    pub fn run(&mut self, max_iter: usize) {
        while !self.converged && self.trace.len() < max_iter {
            self.step();
        }
    }

    pub fn bounds(&self) -> Vec<QuantizerBounds> {
        self.centers
            .iter()
            .map(|&(l, u)| QuantizerBounds::new(l as f32, u as f32))
            .collect()
    }

    pub fn quantizers(&self, kind: GroupKind, bits: u8) -> Result<GroupQuantizers> {
        let bounds = match kind {
            GroupKind::ChannelGrouping => self.bounds(),
            GroupKind::AttentionGrouping => self
                .centers
                .iter()
                .map(|&(_, u)| QuantizerBounds::new(0.0, u as f32))
                .collect(),
        };
        GroupQuantizers::from_bounds(kind, bounds, bits)
    }

    /// Assignment of the calibration points, in their original order.
    pub fn assignment(&self) -> GroupAssignment {
        let mut indices = vec![0; self.points.len()];
        for (sorted_i, &orig) in self.order.iter().enumerate() {
            indices[orig] = self.assign.get(sorted_i).copied().unwrap_or(0);
        }
        GroupAssignment { indices }
    }
}

fn nearest_center(p: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[inline]
fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dl = a.0 - b.0;
    let du = a.1 - b.1;
    dl * dl + du * du
}

fn objective(points: &[(f64, f64)], assign: &[usize], centers: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(&p, &g)| sq_dist(p, centers[g]))
        .sum()
}

/// Means per group, re-seeding empty groups. Returns whether any group was re-seeded.
fn m_step(points: &[(f64, f64)], assign: &[usize], centers: &mut [(f64, f64)]) -> bool {
    let groups = centers.len();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); groups];
    for (&(lo, hi), &g) in points.iter().zip(assign) {
        let s = &mut sums[g];
        s.0 += lo;
        s.1 += hi;
        s.2 += 1;
    }
    let mut empty = Vec::new();
    for (g, &(lo, hi, n)) in sums.iter().enumerate() {
        if n > 0 {
            centers[g] = (lo / n as f64, hi / n as f64);
        } else {
            empty.push(g);
        }
    }
    if empty.is_empty() {
        return false;
    }
    let mut dist: Vec<f64> = points
        .iter()
        .zip(assign)
        .map(|(&p, &g)| sq_dist(p, centers[g]))
        .collect();
    for g in empty {
        let mut pick = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[pick] {
                pick = i;
            }
        }
        centers[g] = points[pick];
        dist[pick] = f64::NEG_INFINITY;
    }
    true
}

/// Farthest-point seeding: a seeded random first center, then repeatedly the
/// point farthest from all chosen centers (lowest sorted index on ties).
fn farthest_point_seeds(points: &[(f64, f64)], groups: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = points[rng.random_range(0..points.len())];
    let mut centers = Vec::with_capacity(groups);
    centers.push(first);
    let mut nearest: Vec<f64> = points.iter().map(|&p| sq_dist(p, first)).collect();
    while centers.len() < groups {
        let mut pick = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[pick] {
                pick = i;
            }
        }
        let c = points[pick];
        centers.push(c);
        for (n, &p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, c));
        }
    }
    centers
}

/// Outcome of a full calibration run.
#[derive(Debug, Clone)]
pub struct EmResult {
    pub quantizers: GroupQuantizers,
    pub assignment: GroupAssignment,
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl EmResult {
    pub fn objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }
}

/// Clusters channel ranges into `cfg.groups` quantizers.
pub fn em_calibrate(points: &[RangePoint], cfg: &CalibConfig) -> Result<EmResult> {
    cfg.validate()?;
    let mut state = EmState::new(points, cfg.groups, cfg.seed, cfg.tol)?;
    state.run(cfg.max_iter);
    Ok(EmResult {
        quantizers: state.quantizers(GroupKind::ChannelGrouping, cfg.bits)?,
        assignment: state.assignment(),
        trace: state.trace().to_vec(),
        converged: state.is_converged(),
    })
}

pub fn attention_points(row_maxes: &[f32]) -> Result<Vec<RangePoint>> {
    if let Some(&bad) = row_maxes.iter().find(|&&m| !(m > 0.0 && m <= 1.0)) {
        return Err(Error::InvalidConfig(format!(
            "attention row maximum {bad} outside (0, 1]"
        )));
    }
    Ok(row_maxes.iter().map(|&m| RangePoint::new(0.0, m)).collect())
}

/// One-dimensional k-means on attention row maxima; every quantizer keeps a
/// zero lower bound.
pub fn em_calibrate_attention(row_maxes: &[f32], cfg: &CalibConfig) -> Result<EmResult> {
    cfg.validate()?;
    let points = attention_points(row_maxes)?;
    let mut state = EmState::new(&points, cfg.groups, cfg.seed, cfg.tol)?;
    state.run(cfg.max_iter);
    Ok(EmResult {
        quantizers: state.quantizers(GroupKind::AttentionGrouping, cfg.bits)?,
        assignment: state.assignment(),
        trace: state.trace().to_vec(),
        converged: state.is_converged(),
    })
}

/// Quantizes `x` column by column with the quantizer of each column's group.
pub fn quantize_columns(x: &Tensor, qparams: &[QParams], assign: &GroupAssignment) -> Result<IntTensor> {
    let (_, c) = x.dims2()?;
    check_assignment(assign, c, qparams.len())?;
    let bits = qparams[0].bits;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| qparams[assign.indices[i % c]].quantize_scalar(v))
        .collect();
    Ok(IntTensor {
        shape: x.shape().to_vec(),
        data,
        bits,
    })
}

fn check_assignment(assign: &GroupAssignment, units: usize, groups: usize) -> Result<()> {
    if assign.len() != units {
        return Err(Error::shape(
            "group assignment",
            format!("{} entries for {units} units", assign.len()),
        ));
    }
    if let Some(&bad) = assign.indices.iter().find(|&&g| g >= groups) {
        return Err(Error::MissingGroupParams {
            group: bad,
            available: groups,
        });
    }
    Ok(())
}

/// Inference-time path: fresh per-instance ranges, nearest fixed quantizer
/// per channel, then quantization with that quantizer.
pub fn quantize_activation_igq(x: &Tensor, q: &GroupQuantizers) -> Result<(IntTensor, GroupAssignment)> {
    let stats = channel_stats(x)?;
    let assign = assign_groups(&stats, q)?;
    let codes = quantize_columns(x, &q.qparams, &assign)?;
    Ok((codes, assign))
}

const EXACT_CHUNK: usize = 256;

/// Quantized weight with zero-points already subtracted, ready for integer products.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWeight {
    rows: usize,
    cols: usize,
    /// Centered codes held as floats; every value is an integer in [-255, 255].
    centered: Vec<f32>,
    scales: Vec<f32>,
}

impl PreparedWeight {
    pub fn new(codes: &IntTensor, qparams: &[QParams]) -> Result<Self> {
        let (rows, cols) = match codes.shape.as_slice() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("prepared weight", format!("rank-2 expected, got {s:?}"))),
        };
        if qparams.len() != cols {
            return Err(Error::shape(
                "prepared weight",
                format!("{cols} columns but {} quantizers", qparams.len()),
            ));
        }
        // |Σ (x−z)(w−z)| ≤ rows·255² must fit the i32 accumulator
        if rows > (i32::MAX / (255 * 255)) as usize {
            return Err(Error::shape("prepared weight", format!("{rows} rows overflow i32 accumulation")));
        }
        let centered = codes
            .data
            .iter()
            .enumerate()
            .map(|(i, &c)| (c as i32 - qparams[i % cols].zero_point as i32) as f32)
            .collect();
        Ok(Self {
            rows,
            cols,
            centered,
            scales: qparams.iter().map(|q| q.scale).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `Σ_g s_g · (X̂_g − z_g)(Ŵ_g − z_w)`, scaled per output column by the weight scale.
pub fn groupwise_matmul_codes(
    x: &IntTensor,
    group_qparams: &[QParams],
    assign: &GroupAssignment,
    w: &PreparedWeight,
) -> Result<Tensor> {
    let (n, c) = match x.shape.as_slice() {
        &[n, c] => (n, c),
        s => return Err(Error::shape("groupwise_matmul", format!("rank-2 expected, got {s:?}"))),
    };
    if c != w.rows {
        return Err(Error::shape(
            "groupwise_matmul",
            format!("activation has {c} channels, weight {} rows", w.rows),
        ));
    }
    check_assignment(assign, c, group_qparams.len())?;

    let d = w.cols;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); group_qparams.len()];
    for (ch, &g) in assign.indices.iter().enumerate() {
        members[g].push(ch);
    }
    let mut out = vec![0.0f32; n * d];
    let mut acc = vec![0i32; d];
    let mut partial = vec![0.0f32; d];
    for (x_row, o_row) in x.data.chunks_exact(c).zip(out.chunks_exact_mut(d)) {
        for (g, chans) in members.iter().enumerate() {
            if chans.is_empty() {
                continue;
            }
            let z = group_qparams[g].zero_point as i32;
            acc.iter_mut().for_each(|a| *a = 0);
            // float sums of at most EXACT_CHUNK products ≤ 255² stay below
            // 2^24, so each chunk is an exact integer before it is folded in
            for chunk in chans.chunks(EXACT_CHUNK) {
                partial.iter_mut().for_each(|p| *p = 0.0);
                for &ch in chunk {
                    let xv = x_row[ch] as i32 - z;
                    if xv == 0 {
                        continue;
                    }
                    let xv = xv as f32;
                    let w_row = &w.centered[ch * d..(ch + 1) * d];
                    for (p, &wv) in partial.iter_mut().zip(w_row) {
                        *p += xv * wv;
                    }
                }
                for (a, &p) in acc.iter_mut().zip(&partial) {
                    *a += p as i32;
                }
            }
            let s = group_qparams[g].scale;
            for (o, &a) in o_row.iter_mut().zip(&acc) {
                *o += s * a as f32;
            }
        }
        for (o, &sw) in o_row.iter_mut().zip(&w.scales) {
            *o *= sw;
        }
    }
    Tensor::matrix(n, d, out)
}

/// Group-wise quantized product `Q(X)·Q(W)` from float operands.
pub fn groupwise_matmul(
    x: &Tensor,
    w: &Tensor,
    act_q: &GroupQuantizers,
    assign: &GroupAssignment,
    w_qparams: &[QParams],
) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let (wc, wd) = w.dims2()?;
    if c != wc {
        return Err(Error::shape(
            "groupwise_matmul",
            format!("activation has {c} channels, weight {wc} rows"),
        ));
    }
    if w_qparams.len() != wd {
        return Err(Error::shape(
            "groupwise_matmul",
            format!("{wd} output channels but {} weight quantizers", w_qparams.len()),
        ));
    }
    let x_codes = quantize_columns(x, &act_q.qparams, assign)?;
    let w_codes = IntTensor {
        shape: vec![wc, wd],
        data: w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| w_qparams[i % wd].quantize_scalar(v))
            .collect(),
        bits: w_qparams.first().map_or(act_q.bits, |q| q.bits),
    };
    let prepared = PreparedWeight::new(&w_codes, w_qparams)?;
    groupwise_matmul_codes(&x_codes, &act_q.qparams, assign, &prepared)
}

/// One quantizer per unit from its own range: the per-channel / per-row
/// ceiling that grouping approaches as `G` grows.
pub fn per_unit_quantizers(points: &[RangePoint], kind: GroupKind, bits: u8) -> Result<GroupQuantizers> {
    let bounds = points
        .iter()
        .map(|p| match kind {
            GroupKind::ChannelGrouping => QuantizerBounds::new(p.min, p.max),
            GroupKind::AttentionGrouping => QuantizerBounds::new(0.0, p.max),
        })
        .collect();
    GroupQuantizers::from_bounds(kind, bounds, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_weight_per_column, WeightQuantConfig};
    use crate::tensor::matmul;
    use proptest::prelude::*;
    use rand::Rng;

    fn b(l: f32, u: f32) -> QuantizerBounds {
        QuantizerBounds::new(l, u)
    }

    fn stats_of(points: &[(f32, f32)]) -> ChannelStats {
        ChannelStats {
            mins: points.iter().map(|p| p.0).collect(),
            maxs: points.iter().map(|p| p.1).collect(),
        }
    }

    /// Exhaustive optimum of the clustering objective over all labelings.
    fn brute_force_objective(points: &[(f64, f64)], groups: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; n];
        loop {
            let mut total = 0.0;
            for g in 0..groups {
                let members: Vec<_> = (0..n).filter(|&i| labels[i] == g).collect();
                if members.is_empty() {
                    continue;
                }
                let m = members.len() as f64;
                let cl = members.iter().map(|&i| points[i].0).sum::<f64>() / m;
                let cu = members.iter().map(|&i| points[i].1).sum::<f64>() / m;
                total += members
                    .iter()
                    .map(|&i| (points[i].0 - cl).powi(2) + (points[i].1 - cu).powi(2))
                    .sum::<f64>();
            }
            best = best.min(total);
            let mut k = 0;
            loop {
                if k == n {
                    return best;
                }
                labels[k] += 1;
                if labels[k] < groups {
                    break;
                }
                labels[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn channel_stats_examples() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let s = channel_stats(&x).unwrap();
        assert_eq!(s.mins, vec![1.0, -2.0]);
        assert_eq!(s.maxs, vec![3.0, 0.0]);

        let x = Tensor::matrix(3, 2, vec![4.5; 6]).unwrap();
        let s = channel_stats(&x).unwrap();
        assert_eq!((s.mins.clone(), s.maxs.clone()), (vec![4.5; 2], vec![4.5; 2]));

        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, -3.0]).unwrap();
        let s = channel_stats(&x).unwrap();
        assert_eq!(s.mins, s.maxs);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(channel_distance(RangePoint::new(-1.0, 2.0), b(-1.0, 2.0)), 0.0);
        assert_eq!(channel_distance(RangePoint::new(0.0, 1.0), b(-1.0, 2.0)), 2.0);
        let delta = 0.25f32;
        assert_eq!(channel_distance(RangePoint::new(0.0, 0.0), b(0.0, delta)), 0.0625);

        assert_eq!(attention_row_distance(0.9, 0.9), 0.0);
        assert!((attention_row_distance(0.1, 0.9) - 0.64).abs() < 1e-7);
        assert_eq!(attention_row_distance(1.0, 0.0), 1.0);
    }

    #[test]
    fn assignment_examples() {
        let one = GroupQuantizers::from_bounds(GroupKind::ChannelGrouping, vec![b(-1.0, 1.0)], 4).unwrap();
        let stats = stats_of(&[(0.0, 1.0), (-5.0, 5.0), (2.0, 3.0)]);
        assert_eq!(assign_groups(&stats, &one).unwrap().indices, vec![0, 0, 0]);

        let two = GroupQuantizers::from_bounds(
            GroupKind::ChannelGrouping,
            vec![b(-1.0, 1.0), b(0.0, 4.0)],
            4,
        )
        .unwrap();
        let stats = stats_of(&[(0.1, 3.9)]);
        assert_eq!(assign_groups(&stats, &two).unwrap().indices, vec![1]);

        // (−0.5, 2.5) is at distance 0.25 + 2.25 from both quantizers
        let stats = stats_of(&[(-0.5, 2.5)]);
        assert_eq!(
            channel_distance(stats.point(0), two.bounds[0]),
            channel_distance(stats.point(0), two.bounds[1])
        );
        assert_eq!(assign_groups(&stats, &two).unwrap().indices, vec![0]);
    }

    #[test]
    fn assign_rejects_attention_quantizers() {
        let q = GroupQuantizers::from_bounds(GroupKind::AttentionGrouping, vec![b(0.0, 0.5)], 4).unwrap();
        assert!(assign_groups(&stats_of(&[(0.0, 1.0)]), &q).is_err());
    }

    #[test]
    fn update_bounds_examples() {
        let stats = stats_of(&[(0.0, 1.0), (0.2, 0.8)]);
        let assign = GroupAssignment { indices: vec![0, 0] };
        let bounds = update_bounds(&stats, &assign, 1).unwrap();
        assert!((bounds[0].lower - 0.1).abs() < 1e-7);
        assert!((bounds[0].upper - 0.9).abs() < 1e-7);

        let stats = stats_of(&[(-3.0, 7.0)]);
        let bounds = update_bounds(&stats, &GroupAssignment { indices: vec![0] }, 1).unwrap();
        assert_eq!(bounds[0], b(-3.0, 7.0));

        let stats = stats_of(&[(1.0, 2.0); 4]);
        let bounds = update_bounds(&stats, &GroupAssignment { indices: vec![0; 4] }, 1).unwrap();
        assert_eq!(bounds[0], b(1.0, 2.0));
    }

    #[test]
    fn update_bounds_reseeds_empty_groups() {
        let stats = stats_of(&[(0.0, 1.0), (0.0, 1.0), (-4.0, 9.0)]);
        let bounds = update_bounds(&stats, &GroupAssignment { indices: vec![0, 0, 0] }, 2).unwrap();
        assert_eq!(bounds[1], b(-4.0, 9.0));
        assert!(update_bounds(&stats, &GroupAssignment { indices: vec![0, 2, 0] }, 2).is_err());
    }

    #[test]
    fn em_recovers_separated_clusters() {
        let mut points = vec![RangePoint::new(0.0, 1.0); 10];
        points.extend(vec![RangePoint::new(-8.0, 8.0); 10]);
        let res = em_calibrate(&points, &CalibConfig::new(2, 4)).unwrap();
        assert_eq!(res.objective(), 0.0);
        let mut got: Vec<_> = res.quantizers.bounds.iter().map(|q| (q.lower, q.upper)).collect();
        got.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(got, vec![(-8.0, 8.0), (0.0, 1.0)]);
        let a = &res.assignment.indices;
        assert!(a[..10].iter().all(|&g| g == a[0]));
        assert!(a[10..].iter().all(|&g| g == a[10]));
        assert_ne!(a[0], a[10]);

        let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.min as f64, p.max as f64)).collect();
        assert_eq!(brute_force_objective(&pts, 2), 0.0);
    }

    #[test]
    fn em_reaches_brute_force_optimum_on_small_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // three tight clusters, G = 3
            let centers = [(-4.0f32, 4.0f32), (0.0, 1.0), (2.0, 9.0)];
            let points: Vec<RangePoint> = (0..9)
                .map(|i| {
                    let (l, u) = centers[i % 3];
                    RangePoint::new(l + rng.random_range(-0.1..0.1), u + rng.random_range(-0.1..0.1))
                })
                .collect();
            let res = em_calibrate(&points, &CalibConfig::new(3, 4)).unwrap();
            let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.min as f64, p.max as f64)).collect();
            let best = brute_force_objective(&pts, 3);
            assert!((res.objective() - best).abs() <= 1e-9 * (1.0 + best));
        }
    }

    #[test]
    fn em_with_enough_groups_is_exact() {
        let points = vec![
            RangePoint::new(0.0, 1.0),
            RangePoint::new(-1.0, 3.0),
            RangePoint::new(0.0, 1.0),
            RangePoint::new(2.0, 2.5),
        ];
        let res = em_calibrate(&points, &CalibConfig::new(5, 8)).unwrap();
        assert_eq!(res.objective(), 0.0);
    }

    #[test]
    fn em_single_group_is_the_mean() {
        let points = vec![RangePoint::new(0.0, 1.0), RangePoint::new(-2.0, 5.0), RangePoint::new(1.0, 3.0)];
        let res = em_calibrate(&points, &CalibConfig::new(1, 8)).unwrap();
        assert!((res.quantizers.bounds[0].lower - (-1.0 / 3.0)).abs() < 1e-6);
        assert!((res.quantizers.bounds[0].upper - 3.0).abs() < 1e-6);
        assert!(res.trace.len() <= 2);
    }

    #[test]
    fn em_widens_zero_width_groups() {
        let points = vec![RangePoint::new(2.0, 2.0); 3];
        let res = em_calibrate(&points, &CalibConfig::new(1, 4)).unwrap();
        let q = res.quantizers.bounds[0];
        assert_eq!(q.lower, 2.0);
        assert!(q.upper > q.lower);
        assert!(res.quantizers.qparams[0].scale > 0.0);
    }

    #[test]
    fn attention_em_examples() {
        let mut maxes = vec![0.9f32; 5];
        maxes.extend(vec![0.1f32; 5]);
        let res = em_calibrate_attention(&maxes, &CalibConfig::new(2, 4)).unwrap();
        let mut v: Vec<f32> = res.quantizers.bounds.iter().map(|b| b.upper).collect();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, vec![0.1, 0.9]);
        assert_eq!(res.objective(), 0.0);
        assert!(res.quantizers.bounds.iter().all(|b| b.lower == 0.0));
        assert!(res.quantizers.qparams.iter().all(|q| q.zero_point == 0));

        let res = em_calibrate_attention(&[0.4; 6], &CalibConfig::new(3, 4)).unwrap();
        assert!(res.quantizers.bounds.iter().all(|b| (b.upper - 0.4).abs() < 1e-7));

        let res = em_calibrate_attention(&[0.2, 0.4, 0.9], &CalibConfig::new(1, 4)).unwrap();
        assert!((res.quantizers.bounds[0].upper - 0.5).abs() < 1e-6);

        assert!(em_calibrate_attention(&[0.0, 0.5], &CalibConfig::new(1, 4)).is_err());
    }

    #[test]
    fn em_rejects_bad_config() {
        let pts = [RangePoint::new(0.0, 1.0)];
        assert!(em_calibrate(&pts, &CalibConfig::new(0, 4)).is_err());
        assert!(em_calibrate(&[], &CalibConfig::new(1, 4)).is_err());
        let mut cfg = CalibConfig::new(1, 4);
        cfg.max_iter = 0;
        assert!(em_calibrate(&pts, &cfg).is_err());
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, spread: bool) -> Tensor {
        let scales: Vec<f32> = (0..c)
            .map(|_| if spread { 2f32.powf(rng.random_range(-2.0..2.0)) } else { 1.0 })
            .collect();
        Tensor::from_fn(&[r, c], |i| rng.random_range(-1.0..1.0) * scales[i % c] + 0.3)
    }

    fn dequant_oracle(x: &Tensor, q: &GroupQuantizers, assign: &GroupAssignment, w: &Tensor, wq: &[QParams]) -> Vec<f64> {
        let (n, c) = x.dims2().unwrap();
        let (_, d) = w.dims2().unwrap();
        let xd: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| q.qparams[assign.indices[i % c]].fake_quantize(v) as f64)
            .collect();
        let wd: Vec<f64> = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| wq[i % d].fake_quantize(v) as f64)
            .collect();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                for k in 0..c {
                    out[i * d + j] += xd[i * c + k] * wd[k * d + j];
                }
            }
        }
        out
    }

    fn rel_err(got: &Tensor, oracle: &[f64]) -> f64 {
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = got
            .data()
            .iter()
            .zip(oracle)
            .fold(0.0f64, |m, (&g, &o)| m.max((g as f64 - o).abs()));
        if scale == 0.0 { diff } else { diff / scale }
    }

    #[test]
    fn groupwise_matmul_matches_dequant_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 8, 16, true);
        let w = random_matrix(&mut rng, 16, 4, false);
        let stats = channel_stats(&x).unwrap();
        let cal = em_calibrate(&stats.points(), &CalibConfig::new(4, 4)).unwrap();
        let (_, assign) = quantize_activation_igq(&x, &cal.quantizers).unwrap();
        let wq = quantize_weight_per_column(&w, &WeightQuantConfig::for_bits(4)).unwrap();
        let got = groupwise_matmul(&x, &w, &cal.quantizers, &assign, &wq.qparams).unwrap();
        assert!(rel_err(&got, &dequant_oracle(&x, &cal.quantizers, &assign, &w, &wq.qparams)) <= 1e-4);
    }

    #[test]
    fn single_group_matches_plain_quantized_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 6, 10, false);
        let w = random_matrix(&mut rng, 10, 3, false);
        let q = GroupQuantizers::from_bounds(GroupKind::ChannelGrouping, vec![b(-1.0, 1.5)], 8).unwrap();
        let assign = GroupAssignment { indices: vec![0; 10] };
        let wq = quantize_weight_per_column(&w, &WeightQuantConfig::for_bits(8)).unwrap();
        let got = groupwise_matmul(&x, &w, &q, &assign, &wq.qparams).unwrap();
        let xq = dequantize(&crate::quant::quantize(&x, &q.qparams[0]), &q.qparams[0]).unwrap();
        let plain = matmul(&xq, &wq.dequantize()).unwrap();
        for (a, e) in got.data().iter().zip(plain.data()) {
            assert!((a - e).abs() <= 1e-4 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn zero_activation_gives_zero_output() {
        let x = Tensor::zeros(&[3, 4]);
        let w = Tensor::from_fn(&[4, 2], |i| i as f32 - 3.0);
        let q = GroupQuantizers::from_bounds(
            GroupKind::ChannelGrouping,
            vec![b(-0.7, 1.3), b(-2.0, 0.4)],
            4,
        )
        .unwrap();
        let assign = GroupAssignment { indices: vec![0, 1, 1, 0] };
        let wq = quantize_weight_per_column(&w, &WeightQuantConfig::for_bits(4)).unwrap();
        let got = groupwise_matmul(&x, &w, &q, &assign, &wq.qparams).unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn groupwise_matmul_errors() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let q = GroupQuantizers::from_bounds(GroupKind::ChannelGrouping, vec![b(0.0, 1.0)], 4).unwrap();
        let wq = vec![q.qparams[0]; 2];
        let assign = GroupAssignment { indices: vec![0; 3] };
        assert!(matches!(
            groupwise_matmul(&x, &w, &q, &assign, &wq),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = Tensor::zeros(&[3, 2]);
        let bad = GroupAssignment { indices: vec![0, 1, 0] };
        assert!(matches!(
            groupwise_matmul(&x, &w, &q, &bad, &wq),
            Err(Error::MissingGroupParams { group: 1, .. })
        ));
    }

    #[test]
    fn instance_assignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 12, 8, true);
        let stats = channel_stats(&x).unwrap();
        let cal = em_calibrate(&stats.points(), &CalibConfig::new(3, 4)).unwrap();
        let (_, assign) = quantize_activation_igq(&x, &cal.quantizers).unwrap();
        assert_eq!(assign, cal.assignment);

        let narrow = GroupQuantizers::from_bounds(
            GroupKind::ChannelGrouping,
            vec![b(-0.1, 0.1), b(-50.0, 50.0)],
            4,
        )
        .unwrap();
        let small = Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.37).sin() * 0.1);
        let (_, assign) = quantize_activation_igq(&small, &narrow).unwrap();
        assert!(assign.indices.iter().all(|&g| g == 0));

        let perm: Vec<usize> = vec![3, 0, 7, 1, 6, 2, 5, 4];
        let (n, c) = x.dims2().unwrap();
        let permuted = Tensor::from_fn(&[n, c], |i| x.data()[(i / c) * c + perm[i % c]]);
        let (_, pa) = quantize_activation_igq(&permuted, &cal.quantizers).unwrap();
        let expected: Vec<usize> = perm.iter().map(|&p| assign_groups(&stats, &cal.quantizers).unwrap().indices[p]).collect();
        assert_eq!(pa.indices, expected);
    }

    #[test]
    fn per_unit_quantizers_reproduce_each_range() {
        let pts = [RangePoint::new(-1.0, 2.0), RangePoint::new(0.5, 0.5)];
        let q = per_unit_quantizers(&pts, GroupKind::ChannelGrouping, 4).unwrap();
        assert_eq!(q.bounds[0], b(-1.0, 2.0));
        assert!(q.bounds[1].upper > 0.5);
        let q = per_unit_quantizers(&[RangePoint::new(0.0, 0.3)], GroupKind::AttentionGrouping, 4).unwrap();
        assert_eq!(q.qparams[0].zero_point, 0);
    }

    fn corpus() -> impl Strategy<Value = (Vec<(f32, f32)>, usize, u64)> {
        (prop::collection::vec((-5.0f32..5.0, 0.0f32..6.0), 1..80), 1usize..10, any::<u64>())
            .prop_map(|(v, g, s)| (v.into_iter().map(|(l, w)| (l, l + w)).collect(), g, s))
    }

    proptest! {
        #[test]
        fn em_objective_never_increases((pts, g, seed) in corpus()) {
            let points: Vec<_> = pts.iter().map(|&(l, u)| RangePoint::new(l, u)).collect();
            let mut cfg = CalibConfig::new(g, 4);
            cfg.seed = seed;
            let res = em_calibrate(&points, &cfg).unwrap();
            for w in res.trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            prop_assert!(res.converged);
        }

        #[test]
        fn em_is_permutation_equivariant((pts, g, seed) in corpus(), rot in 0usize..80) {
            let points: Vec<_> = pts.iter().map(|&(l, u)| RangePoint::new(l, u)).collect();
            let mut rotated = points.clone();
            let k = rot % points.len();
            rotated.rotate_left(k);
            let mut cfg = CalibConfig::new(g, 4);
            cfg.seed = seed;
            let a = em_calibrate(&points, &cfg).unwrap();
            let r = em_calibrate(&rotated, &cfg).unwrap();
            prop_assert_eq!(&a.quantizers.bounds, &r.quantizers.bounds);
            let mut expect = a.assignment.indices.clone();
            expect.rotate_left(k);
            prop_assert_eq!(expect, r.assignment.indices);
        }
    }
}
