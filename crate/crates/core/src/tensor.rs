//! Dense row-major `f64` tensors, the seeded generator used for every random
//! draw in the crate, and the 4D kernel type.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense tensor with 1 to 4 dimensions stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!(
            "expected 1 to 4 dimensions, got {}",
            shape.len()
        )));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "extent {pos} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Standard normal samples drawn from `rng` in row-major order.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| rng.normal()).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("tensor data contains NaN or Inf".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) into {shape:?} ({len} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Deterministic generator: ChaCha8 keyed through `seed_from_u64`, with
/// normals produced by the Box–Muller transform (both branches used, the
/// sine branch cached for the next call). Uniforms carry 53 random bits.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Convolution weights of shape `[M, C, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    m_out: usize,
    c_in: usize,
    k: usize,
    data: Tensor,
}

impl KernelTensor {
    /// Accepts only 4D tensors with square spatial support.
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "kernel must be 4D [M, C, k, k], got {s:?}"
            )));
        }
        if s[2] != s[3] {
            return Err(Error::shape(format!(
                "kernel must be square, got spatial {}x{}",
                s[2], s[3]
            )));
        }
        Ok(KernelTensor {
            m_out: s[0],
            c_in: s[1],
            k: s[2],
            data,
        })
    }

    pub fn zeros(m_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[m_out, c_in, k, k])?)
    }

    pub fn from_vec(m_out: usize, c_in: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[m_out, c_in, k, k], data)?)
    }

    pub fn randn(m_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(Tensor::randn(&[m_out, c_in, k, k], rng)?)
    }

    /// Normal init with std `sqrt(2 / (C k^2))`.
    pub fn he_normal(m_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Ok(Self::randn(m_out, c_in, k, rng)?.scaled(std))
    }

    pub fn m_out(&self) -> usize {
        self.m_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    /// Number of entries in one filter, `C k^2`.
    pub fn filter_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    pub fn index(&self, m: usize, c: usize, p: usize, q: usize) -> usize {
        ((m * self.c_in + c) * self.k + p) * self.k + q
    }

    #[inline]
    pub fn at(&self, m: usize, c: usize, p: usize, q: usize) -> f64 {
        self.data.data()[self.index(m, c, p, q)]
    }

    /// Filter `m` as a contiguous `[C, k, k]` slice.
    pub fn filter(&self, m: usize) -> &[f64] {
        let n = self.filter_len();
        &self.data.data()[m * n..(m + 1) * n]
    }

    pub fn scaled(&self, alpha: f64) -> KernelTensor {
        KernelTensor {
            data: self.data.scale(alpha),
            ..*self
        }
    }

    /// The `[M, C k^2]` kernel matrix.
    pub fn as_matrix(&self) -> Tensor {
        self.data
            .reshape(&[self.m_out, self.filter_len()])
            .expect("element count is preserved")
    }
}

/// Replaces the rows of a `[rows, cols]` tensor by an orthonormal set via
/// modified Gram–Schmidt. Requires `rows <= cols` and full row rank.
pub fn gram_schmidt_rows(matrix: &Tensor) -> Result<Tensor> {
    let s = matrix.shape();
    if s.len() != 2 || s[0] > s[1] {
        return Err(Error::shape(format!(
            "Gram-Schmidt needs a 2D matrix with rows <= cols, got {s:?}"
        )));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut out = matrix.data().to_vec();
    for i in 0..rows {
        for j in 0..i {
            let (done, rest) = out.split_at_mut(i * cols);
            let prev = &done[j * cols..(j + 1) * cols];
            let cur = &mut rest[..cols];
            let dot: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= dot * p);
        }
        let row = &mut out[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numerical(format!(
                "row {i} is linearly dependent on the previous rows"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_vec(s, out)
}
