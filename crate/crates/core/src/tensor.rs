//! Dense row-major tensors and the handful of kernels the runtime needs.
//!
//! Every kernel is a pure function over borrowed inputs. Matrix products
//! accumulate in `f32`, the same precision a typical inference kernel uses.

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("zero-sized shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("zero-sized shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as `[.., row_len]`.
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.row_len())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.row_len() {
            return Err(Error::shape(
                "add_row_bias",
                format!("row length {} vs bias {}", self.row_len(), bias.len()),
            ));
        }
        for row in self.data.chunks_exact_mut(bias.len()) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Column-wise mean of a matrix, as a `[cols]` vector.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut acc = vec![0.0f32; c];
        for row in self.rows() {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
        let inv = 1.0 / r as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        Self::vector(acc)
    }

    /// Copies columns `[start, start + width)` of a matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c || width == 0 {
            return Err(Error::shape(
                "columns",
                format!("[{start}, {}) out of {c} columns", start + width),
            ));
        }
        let mut out = Vec::with_capacity(r * width);
        for row in self.rows() {
            out.extend_from_slice(&row[start..start + width]);
        }
        Self::matrix(r, width, out)
    }
}

/// Integer codes produced by a uniform quantizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
    pub bits: u8,
}

impl IntTensor {
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

/// `a[N×C] · b[C×D]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims2()?;
    let (c2, d) = b.dims2()?;
    if c != c2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {c} and {c2} differ"),
        ));
    }
    let mut out = vec![0.0f32; n * d];
    matmul_into(a.data(), b.data(), &mut out, n, c, d);
    Tensor::matrix(n, d, out)
}

/// Raw `out += a · b` over row-major slices.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], n: usize, c: usize, d: usize) {
    for (a_row, o_row) in a.chunks_exact(c).zip(out.chunks_exact_mut(d)).take(n) {
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * d..(k + 1) * d];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax over the last dimension, stabilized by subtracting the row max.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let w = out.row_len();
    for row in out.data.chunks_exact_mut(w) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn layernorm(a: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layernorm",
            format!("{c} channels vs gamma {} / beta {}", gamma.len(), beta.len()),
        ));
    }
    let mut out = a.clone();
    for row in out.data.chunks_exact_mut(c) {
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv_std = 1.0 / (var + eps as f64).sqrt();
        for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *x = ((*x as f64 - mean) * inv_std) as f32 * g + b;
        }
    }
    Ok(out)
}

/// Exact GELU, `x·Φ(x)` with Φ evaluated through `erf`.
pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, c) = a.dims2().unwrap();
        let (_, d) = b.dims2().unwrap();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                for k in 0..c {
                    out[i * d + j] += a.data()[i * c + k] as f64 * b.data()[k * d + j] as f64;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &i2).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive(&a, &b)) {
            assert!((*g as f64 - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&t).data(), &[0.5, 0.5]);
        let t = Tensor::vector(vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_rows(&t).data(), &[0.5, 0.5]);
        let t = Tensor::vector(vec![0.0, 3.0f32.ln()]).unwrap();
        let s = softmax_rows(&t);
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layernorm_examples() {
        let ones = [1.0f32; 3];
        let zeros = [0.0f32; 3];
        let constant = Tensor::matrix(1, 3, vec![2.5; 3]).unwrap();
        let out = layernorm(&constant, &ones, &zeros, LAYERNORM_EPS).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));

        let row = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let out = layernorm(&row, &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 1.0).abs() < 1e-6);

        let out = layernorm(&row, &[0.0, 0.0], &[5.0, 5.0], LAYERNORM_EPS).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-6);
        // 1·Φ(1), Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f32..50.0, 1..40)) {
            let n = values.len();
            let s = softmax_rows(&Tensor::vector(values).unwrap());
            let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&x| x > 0.0 && x <= 1.0));
            prop_assert_eq!(s.numel(), n);
        }

        #[test]
        fn matmul_right_identity_is_exact(r in 1usize..12, c in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, r, c);
            prop_assert_eq!(matmul(&a, &Tensor::identity(c)).unwrap(), a);
        }

        #[test]
        fn matmul_agrees_with_oracle(n in 1usize..=32, c in 1usize..=32, d in 1usize..=32, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, c);
            let b = random(&mut rng, c, d);
            let got = matmul(&a, &b).unwrap();
            for (g, e) in got.data().iter().zip(naive(&a, &b)) {
                prop_assert!((*g as f64 - e).abs() <= 1e-5);
            }
        }
    }
}
