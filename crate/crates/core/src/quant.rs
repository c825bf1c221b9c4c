//! Uniform affine quantizer: bounds to `(scale, zero-point)`, quantize,
//! dequantize, and percentile calibration of per-output-channel weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Clipping range `[lower, upper]` of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerBounds {
    pub lower: f32,
    pub upper: f32,
}

impl QuantizerBounds {
    pub fn new(lower: f32, upper: f32) -> Self {
        Self { lower, upper }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: u8,
    pub bits: u8,
}

impl QParams {
    pub fn max_code(&self) -> u8 {
        max_code(self.bits)
    }

    /// Smallest and largest representable values.
    pub fn grid_range(&self) -> (f32, f32) {
        (
            self.dequantize_code(0),
            self.dequantize_code(self.max_code()),
        )
    }

    #[inline]
    pub fn quantize_scalar(&self, x: f32) -> u8 {
        let q = round_half_away(x / self.scale) + self.zero_point as f32;
        q.clamp(0.0, self.max_code() as f32) as u8
    }

    #[inline]
    pub fn dequantize_code(&self, code: u8) -> f32 {
        self.scale * (code as f32 - self.zero_point as f32)
    }

    #[inline]
    pub fn fake_quantize(&self, x: f32) -> f32 {
        self.dequantize_code(self.quantize_scalar(x))
    }
}

pub fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )))
    }
}

/// Nearest integer, halves rounded away from zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

pub fn derive_qparams(bounds: QuantizerBounds, bits: u8) -> Result<QParams> {
    check_bits(bits)?;
    let QuantizerBounds { lower, upper } = bounds;
    if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
        return Err(Error::DegenerateRange { lower, upper });
    }
    let levels = max_code(bits) as f32;
    let scale = (upper - lower) / levels;
    if !(scale > 0.0) {
        return Err(Error::DegenerateRange { lower, upper });
    }
    let zero_point = round_half_away(-lower / scale).clamp(0.0, levels) as u8;
    Ok(QParams {
        scale,
        zero_point,
        bits,
    })
}

pub fn quantize(x: &Tensor, qp: &QParams) -> IntTensor {
    IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| qp.quantize_scalar(v)).collect(),
        bits: qp.bits,
    }
}

pub fn dequantize(xhat: &IntTensor, qp: &QParams) -> Result<Tensor> {
    if xhat.bits != qp.bits {
        return Err(Error::InvalidConfig(format!(
            "codes carry {} bits, parameters {}",
            xhat.bits, qp.bits
        )));
    }
    Tensor::new(
        xhat.shape.clone(),
        xhat.data.iter().map(|&c| qp.dequantize_code(c)).collect(),
    )
}

/// Percentile (in percent) of `values` by linear interpolation between
/// order statistics. `values` must be non-empty.
pub fn percentile(sorted: &[f32], pct: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantConfig {
    /// Percentile ε, in percent; bounds are the ε-th and (100−ε)-th percentiles.
    pub eps_percentile: f64,
    pub bits: u8,
}

impl WeightQuantConfig {
    /// ε = 5e-2 up to 4 bits, 1e-3 above.
    pub fn for_bits(bits: u8) -> Self {
        let eps_percentile = if bits <= 4 { 5e-2 } else { 1e-3 };
        Self {
            eps_percentile,
            bits,
        }
    }
}

pub fn percentile_weight_bounds(w_row: &[f32], cfg: &WeightQuantConfig) -> Result<QuantizerBounds> {
    if w_row.len() < 2 {
        return Err(Error::shape(
            "percentile_weight_bounds",
            format!("need at least 2 weights, got {}", w_row.len()),
        ));
    }
    if !(0.0..50.0).contains(&cfg.eps_percentile) {
        return Err(Error::InvalidConfig(format!(
            "percentile ε {} outside [0, 50)",
            cfg.eps_percentile
        )));
    }
    let mut sorted = w_row.to_vec();
    sorted.sort_by(f32::total_cmp);
    let lower = percentile(&sorted, cfg.eps_percentile);
    let upper = percentile(&sorted, 100.0 - cfg.eps_percentile);
    if !(upper > lower) {
        return Err(Error::DegenerateRange { lower, upper });
    }
    Ok(QuantizerBounds { lower, upper })
}

/// Weight matrix `[C×D]` quantized with one quantizer per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub codes: IntTensor,
    pub qparams: Vec<QParams>,
}

impl QuantizedWeight {
    pub fn dequantize(&self) -> Tensor {
        let d = self.codes.row_len();
        let data = self
            .codes
            .data
            .iter()
            .enumerate()
            .map(|(i, &c)| self.qparams[i % d].dequantize_code(c))
            .collect();
        Tensor::new(self.codes.shape.clone(), data).expect("shape carried over")
    }
}

pub fn quantize_weight_per_column(w: &Tensor, cfg: &WeightQuantConfig) -> Result<QuantizedWeight> {
    let (c, d) = w.dims2()?;
    let mut qparams = Vec::with_capacity(d);
    let mut column = vec![0.0f32; c];
    for j in 0..d {
        for (i, v) in column.iter_mut().enumerate() {
            *v = w.data()[i * d + j];
        }
        let bounds = match percentile_weight_bounds(&column, cfg) {
            Ok(b) => b,
            // constant column: any range containing the value reproduces it
            Err(Error::DegenerateRange { lower, .. }) => widen_constant(lower),
            Err(e) => return Err(e),
        };
        qparams.push(derive_qparams(bounds, cfg.bits)?);
    }
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| qparams[i % d].quantize_scalar(v))
        .collect();
    Ok(QuantizedWeight {
        codes: IntTensor {
            shape: vec![c, d],
            data,
            bits: cfg.bits,
        },
        qparams,
    })
}

fn widen_constant(v: f32) -> QuantizerBounds {
    if v > 0.0 {
        QuantizerBounds::new(0.0, v)
    } else if v < 0.0 {
        QuantizerBounds::new(v, 0.0)
    } else {
        QuantizerBounds::new(0.0, 1.0)
    }
}
