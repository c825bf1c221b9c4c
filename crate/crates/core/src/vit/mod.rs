//! Toy vision-transformer runtime with quantization hooks at every
//! activation and weight site.
//!
//! Block layout: LayerNorm → multi-head self-attention → residual →
//! LayerNorm → MLP (GELU) → residual. After the blocks every token is
//! classified and the logits are mean-pooled. Inputs are already-embedded
//! tokens `[N×dim]`; a positional embedding is added first and is never
//! quantized.

pub mod calibrate;
pub mod container;
pub mod sites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{layernorm, matmul, softmax_in_place, Tensor, LAYERNORM_EPS};

pub use calibrate::{
    calibrate_model, calibrate_with_stats, collect_stats, CalibratedModel, CalibrationConfig, CalibrationReport,
    SiteQuantizer, SiteStats,
};
pub use container::{load_container, save_container, ModelContainer};
pub use sites::{ModeSet, QuantizationSiteMap, SiteConfig, SiteKind, SiteMode, WeightSiteConfig};

use sites::{act_index, head_act_index, head_linear_index, linear_index, BlockLinear, BlockSite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_tokens: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn toy() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            n_tokens: 16,
            n_classes: 10,
        }
    }

    /// DeiT-B proportions: 12 blocks, width 768, 12 heads, 197 tokens.
    pub fn deit_b_like() -> Self {
        Self {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            n_tokens: 197,
            n_classes: 1000,
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth", self.depth, 0),
            ("dim", self.dim, 1),
            ("heads", self.heads, 1),
            ("mlp_ratio", self.mlp_ratio, 1),
            ("n_tokens", self.n_tokens, 1),
            ("n_classes", self.n_classes, 1),
        ];
        for (name, value, min) in fields {
            if value < min {
                return Err(Error::InvalidConfig(format!("model {name} must be at least {min}")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub w_qkv: Tensor,
    pub b_qkv: Vec<f32>,
    pub w_proj: Tensor,
    pub b_proj: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub w_fc1: Tensor,
    pub b_fc1: Vec<f32>,
    pub w_fc2: Tensor,
    pub b_fc2: Vec<f32>,
}

impl Block {
    pub fn linear(&self, l: BlockLinear) -> (&Tensor, &[f32]) {
        match l {
            BlockLinear::Qkv => (&self.w_qkv, &self.b_qkv),
            BlockLinear::Proj => (&self.w_proj, &self.b_proj),
            BlockLinear::Fc1 => (&self.w_fc1, &self.b_fc1),
            BlockLinear::Fc2 => (&self.w_fc2, &self.b_fc2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub spec: ModelSpec,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub head_w: Tensor,
    pub head_b: Vec<f32>,
}

/// Callbacks at every quantization site of the forward graph.
pub trait Hooks {
    /// `x · w` for the linear layer `linear`, whose input is activation site `site`.
    fn linear(&mut self, site: usize, linear: usize, x: &Tensor, w: &Tensor) -> Result<Tensor>;

    /// Query, key or value activation.
    fn activation(&mut self, site: usize, x: Tensor) -> Result<Tensor>;

    /// Softmax attention `[H×N×N]`.
    fn attention(&mut self, site: usize, a: Tensor) -> Result<Tensor>;

    /// Residual stream entering `block` (`depth` for the classifier input).
    fn block_input(&mut self, _block: usize, _h: &Tensor) {}
}

/// Plain full-precision hooks.
pub struct FpHooks;

impl Hooks for FpHooks {
    fn linear(&mut self, _site: usize, _linear: usize, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        matmul(x, w)
    }

    fn activation(&mut self, _site: usize, x: Tensor) -> Result<Tensor> {
        Ok(x)
    }

    fn attention(&mut self, _site: usize, a: Tensor) -> Result<Tensor> {
        Ok(a)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn scale_columns(w: &mut Tensor, range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) {
    let cols = w.row_len();
    let factors: Vec<f32> = range.clone().map(|_| log_uniform(rng, 0.25, 4.0)).collect();
    for row in w.data_mut().chunks_exact_mut(cols) {
        for (j, f) in range.clone().zip(&factors) {
            row[j] *= f;
        }
    }
}

impl VitModel {
    /// Random "pretrained" weights. Every FC input sees channels whose scales
    /// differ by a log-uniform factor in [0.25, 4]: LayerNorm gains drive the
    /// qkv and fc1 inputs, value columns drive the projection input, fc1
    /// columns drive the fc2 input.
    pub fn synthetic(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.dim;
        let hidden = spec.hidden();
        let pos_embed = normal_matrix(&mut rng, spec.n_tokens, d, 0.1);
        let mut blocks = Vec::with_capacity(spec.depth);
        for _ in 0..spec.depth {
            let ln1_gamma = (0..d).map(|_| log_uniform(&mut rng, 0.25, 4.0)).collect();
            let ln1_beta = normal_vec(&mut rng, d, 0.1);
            let mut w_qkv = normal_matrix(&mut rng, d, 3 * d, 1.0 / (d as f32).sqrt());
            scale_columns(&mut w_qkv, 2 * d..3 * d, &mut rng);
            let b_qkv = normal_vec(&mut rng, 3 * d, 0.02);
            let w_proj = normal_matrix(&mut rng, d, d, 0.5 / (d as f32).sqrt());
            let b_proj = normal_vec(&mut rng, d, 0.02);
            let ln2_gamma = (0..d).map(|_| log_uniform(&mut rng, 0.25, 4.0)).collect();
            let ln2_beta = normal_vec(&mut rng, d, 0.1);
            let mut w_fc1 = normal_matrix(&mut rng, d, hidden, 1.0 / (d as f32).sqrt());
            scale_columns(&mut w_fc1, 0..hidden, &mut rng);
            let b_fc1 = normal_vec(&mut rng, hidden, 0.1);
            let w_fc2 = normal_matrix(&mut rng, hidden, d, 0.5 / (hidden as f32).sqrt());
            let b_fc2 = normal_vec(&mut rng, d, 0.02);
            blocks.push(Block {
                ln1_gamma,
                ln1_beta,
                w_qkv,
                b_qkv,
                w_proj,
                b_proj,
                ln2_gamma,
                ln2_beta,
                w_fc1,
                b_fc1,
                w_fc2,
                b_fc2,
            });
        }
        let head_w = normal_matrix(&mut rng, d, spec.n_classes, 2.0 / (d as f32).sqrt());
        let head_b = vec![0.0; spec.n_classes];
        Ok(Self {
            spec,
            pos_embed,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn linear_weight(&self, linear: usize) -> (&Tensor, &[f32]) {
        if linear == head_linear_index(&self.spec) {
            (&self.head_w, &self.head_b)
        } else {
            let per = sites::LINEARS_PER_BLOCK;
            self.blocks[linear / per].linear(BlockLinear::ALL[linear % per])
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expect = [self.spec.n_tokens, self.spec.dim];
        if x.shape() != expect {
            return Err(Error::shape(
                "vit input",
                format!("expected {expect:?}, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Input tokens plus positional embedding.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        x.add(&self.pos_embed)
    }

    pub fn forward_with(&self, x: &Tensor, hooks: &mut dyn Hooks) -> Result<Vec<f32>> {
        let h = self.embed(x)?;
        self.forward_from(0, h, hooks)
    }

    /// Runs blocks `start..` and the classifier on residual stream `h`.
    pub fn forward_from(&self, start: usize, mut h: Tensor, hooks: &mut dyn Hooks) -> Result<Vec<f32>> {
        for b in start..self.spec.depth {
            hooks.block_input(b, &h);
            h = self.block_forward(b, h, hooks)?;
        }
        hooks.block_input(self.spec.depth, &h);
        // classifier on every token, then mean-pooled: equal to classifying
        // the pooled token, but the classifier input keeps per-token ranges
        let head = head_linear_index(&self.spec);
        let token_logits = hooks.linear(head_act_index(&self.spec), head, &h, &self.head_w)?;
        let mut logits = token_logits.mean_rows()?.reshape(vec![1, self.spec.n_classes])?;
        logits.add_row_bias(&self.head_b)?;
        let mut probs = logits.into_data();
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    fn block_forward(&self, b: usize, h: Tensor, hooks: &mut dyn Hooks) -> Result<Tensor> {
        let blk = &self.blocks[b];
        let spec = &self.spec;
        let (n, d) = (spec.n_tokens, spec.dim);
        let (heads, dh) = (spec.heads, spec.head_dim());

        let a = layernorm(&h, &blk.ln1_gamma, &blk.ln1_beta, LAYERNORM_EPS)?;
        let mut qkv = hooks.linear(
            act_index(b, BlockSite::QkvIn),
            linear_index(b, BlockLinear::Qkv),
            &a,
            &blk.w_qkv,
        )?;
        qkv.add_row_bias(&blk.b_qkv)?;
        let q = hooks.activation(act_index(b, BlockSite::Query), qkv.columns(0, d)?)?;
        let k = hooks.activation(act_index(b, BlockSite::Key), qkv.columns(d, d)?)?;
        let v = hooks.activation(act_index(b, BlockSite::Value), qkv.columns(2 * d, d)?)?;

        let scale = 1.0 / (dh as f32).sqrt();
        let mut attn = vec![0.0f32; heads * n * n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = &mut attn[(hd * n + i) * n..(hd * n + i + 1) * n];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *r = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
                }
                softmax_in_place(row);
            }
        }
        let attn = Tensor::new(vec![heads, n, n], attn)?;
        let attn = hooks.attention(act_index(b, BlockSite::Attention), attn)?;

        let mut o = vec![0.0f32; n * d];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let a_row = &attn.data()[(hd * n + i) * n..(hd * n + i + 1) * n];
                let o_row = &mut o[i * d + off..i * d + off + dh];
                for (j, &aw) in a_row.iter().enumerate() {
                    let vj = &v.row(j)[off..off + dh];
                    for (ov, &vv) in o_row.iter_mut().zip(vj) {
                        *ov += aw * vv;
                    }
                }
            }
        }
        let o = Tensor::matrix(n, d, o)?;
        let mut proj = hooks.linear(
            act_index(b, BlockSite::ProjIn),
            linear_index(b, BlockLinear::Proj),
            &o,
            &blk.w_proj,
        )?;
        proj.add_row_bias(&blk.b_proj)?;
        let h = h.add(&proj)?;

        let a2 = layernorm(&h, &blk.ln2_gamma, &blk.ln2_beta, LAYERNORM_EPS)?;
        let mut f1 = hooks.linear(
            act_index(b, BlockSite::Fc1In),
            linear_index(b, BlockLinear::Fc1),
            &a2,
            &blk.w_fc1,
        )?;
        f1.add_row_bias(&blk.b_fc1)?;
        let g = crate::tensor::gelu(&f1);
        let mut f2 = hooks.linear(
            act_index(b, BlockSite::Fc2In),
            linear_index(b, BlockLinear::Fc2),
            &g,
            &blk.w_fc2,
        )?;
        f2.add_row_bias(&blk.b_fc2)?;
        h.add(&f2)
    }

    /// Deterministic full-precision class probabilities.
    pub fn forward_fp(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.forward_with(x, &mut FpHooks)
    }
}

/// Random token batches whose channel scales vary per instance
/// (log-uniform in [0.25, 4] for every instance and channel).
pub fn synthetic_samples(spec: &ModelSpec, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scales: Vec<f32> = (0..spec.dim).map(|_| log_uniform(&mut rng, 0.25, 4.0)).collect();
            Tensor::from_fn(&[spec.n_tokens, spec.dim], |i| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scales[i % spec.dim]
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            n_tokens: 4,
            n_classes: 3,
        }
    }

    #[test]
    fn spec_validation() {
        ModelSpec::toy().validate().unwrap();
        ModelSpec::deit_b_like().validate().unwrap();
        let mut bad = tiny();
        bad.heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut m = VitModel::synthetic(tiny(), 1).unwrap();
        m.head_w = Tensor::zeros(m.head_w.shape());
        let x = synthetic_samples(&m.spec, 1, 2).pop().unwrap();
        let p = m.forward_fp(&x).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn depth_zero_is_pool_plus_linear() {
        let mut spec = tiny();
        spec.depth = 0;
        let m = VitModel::synthetic(spec, 3).unwrap();
        let x = synthetic_samples(&spec, 1, 4).pop().unwrap();
        let p = m.forward_fp(&x).unwrap();

        // hand-rolled: mean over tokens of (x + pos), then linear, then softmax
        let (n, d, k) = (spec.n_tokens, spec.dim, spec.n_classes);
        let mut pooled = vec![0.0f64; d];
        for t in 0..n {
            for (c, v) in pooled.iter_mut().enumerate() {
                *v += (x.data()[t * d + c] + m.pos_embed.data()[t * d + c]) as f64 / n as f64;
            }
        }
        let logits: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|c| pooled[c] * m.head_w.data()[c * k + j] as f64).sum::<f64>() + m.head_b[j] as f64)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (got, l) in p.iter().zip(&logits) {
            assert!((*got as f64 - (l - mx).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = VitModel::synthetic(ModelSpec::toy(), 5).unwrap();
        let x = synthetic_samples(&m.spec, 1, 6).pop().unwrap();
        assert_eq!(m.forward_fp(&x).unwrap(), m.forward_fp(&x).unwrap());
        let p = m.forward_fp(&x).unwrap();
        assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = VitModel::synthetic(tiny(), 1).unwrap();
        assert!(matches!(
            m.forward_fp(&Tensor::zeros(&[3, 8])),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
