//! Singular values of DBT matrices: dense one-sided Jacobi SVD for desk-scale
//! layers, power iteration for the largest singular value of larger ones, and
//! histogram/report helpers for plotting.

use serde::Serialize;

use crate::conv::ConvGeometry;
use crate::dbt::{DbtMatrix, DenseMatrix};
use crate::error::{Error, Result};
use crate::tensor::{KernelTensor, Rng};

const MAX_SWEEPS: usize = 60;
const ROTATION_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-9;
/// Singular values below this fraction of sigma_max count as zero.
pub const ZERO_REL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All singular values of `a`, descending.
///
/// One-sided (Hestenes) Jacobi on the `min(rows, cols)` vectors of the thinner
/// side: rows of `a` when it is fat, columns when it is tall. Pairs are swept
/// in cyclic order until every pair is orthogonal to `1e-12` relative.
pub fn svd_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    let work = if a.rows() <= a.cols() { a.clone() } else { a.transpose() };
    let (n, len) = (work.rows(), work.cols());
    let mut v = work.data().to_vec();
    let total_sq = a.frob_norm_sq();
    // Pairs whose inner product is this small carry no information.
    let floor = (1e-15 * total_sq.sqrt()).powi(2);

    let mut converged = n < 2;
    let mut residual = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (head, tail) = v.split_at_mut(q * len);
                let vp = &mut head[p * len..(p + 1) * len];
                let vq = &mut tail[..len];
                let alpha = dot(vp, vp);
                let beta = dot(vq, vq);
                let gamma = dot(vp, vq);
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= floor || gamma.abs() <= ROTATION_TOL * scale {
                    continue;
                }
                residual = residual.max(gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (max relative off-diagonal {residual:.3e})"
        )));
    }

    let mut sigma: Vec<f64> = v.chunks(len).map(|c| dot(c, c).sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));

    let sum_sq: f64 = sigma.iter().map(|s| s * s).sum();
    if total_sq > 0.0 && ((sum_sq - total_sq) / total_sq).abs() > TRACE_TOL {
        return Err(Error::Numerical(format!(
            "sum of squared singular values {sum_sq} differs from ||A||_F^2 = {total_sq}"
        )));
    }
    Ok(sigma)
}

/// Outcome of [`sigma_max`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerEstimate {
    pub sigma: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value by power iteration on `K^T K` with sparse products.
/// Stops when the estimate changes by at most `tol` relative between two
/// iterations; otherwise returns the last estimate with `converged = false`.
pub fn sigma_max(dbt: &DbtMatrix, iters: usize, tol: f64) -> Result<PowerEstimate> {
    if iters == 0 {
        return Err(Error::Config("power iteration needs at least one iteration".into()));
    }
    let mut rng = Rng::new(0x5eed_5eed);
    let mut v: Vec<f64> = (0..dbt.cols()).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    for it in 1..=iters {
        let kv = dbt.matvec(&v)?;
        let sigma = dot(&kv, &kv).sqrt();
        let mut w = dbt.rmatvec(&kv)?;
        if normalize(&mut w) == 0.0 {
            return Ok(PowerEstimate {
                sigma: 0.0,
                converged: true,
                iterations: it,
            });
        }
        v = w;
        if (sigma - prev).abs() <= tol * sigma {
            return Ok(PowerEstimate {
                sigma,
                converged: true,
                iterations: it,
            });
        }
        prev = sigma;
    }
    Ok(PowerEstimate {
        sigma: prev,
        converged: false,
        iterations: iters,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[lo, hi]`; values outside the range land in the edge
/// bins, so counts always sum to `values.len()`.
pub fn histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; n_bins];
    for &x in values {
        let pos = ((x - lo) / (hi - lo) * n_bins as f64).floor();
        let bin = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(n_bins - 1)
        };
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometryEcho {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub m_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub rows: usize,
    pub cols: usize,
}

impl From<&ConvGeometry> for GeometryEcho {
    fn from(g: &ConvGeometry) -> Self {
        GeometryEcho {
            c_in: g.c_in(),
            h: g.h(),
            w: g.w(),
            m_out: g.m_out(),
            k: g.k(),
            stride: g.stride(),
            pad: g.pad(),
            rows: g.output_len(),
            cols: g.input_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    /// Smallest value above `ZERO_REL * sigma_max`.
    pub sigma_min_nonzero: f64,
    pub zero_count: usize,
    /// Fraction of all values inside `[1 - unit_eps, 1 + unit_eps]`.
    pub count_unit: f64,
    pub unit_eps: f64,
    pub geometry: Option<GeometryEcho>,
}

impl SpectrumReport {
    pub fn from_values(mut values: Vec<f64>, unit_eps: f64, geometry: Option<GeometryEcho>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let sigma_max = values.first().copied().unwrap_or(0.0);
        let cutoff = ZERO_REL * sigma_max;
        let nonzero: Vec<f64> = values.iter().copied().filter(|&s| s > cutoff).collect();
        let sigma_min_nonzero = nonzero.last().copied().unwrap_or(0.0);
        let unit = values.iter().filter(|s| (*s - 1.0).abs() <= unit_eps).count();
        SpectrumReport {
            zero_count: values.len() - nonzero.len(),
            count_unit: if values.is_empty() { 0.0 } else { unit as f64 / values.len() as f64 },
            singular_values: values,
            sigma_max,
            sigma_min_nonzero,
            unit_eps,
            geometry,
        }
    }

    /// `sigma_max / sigma_min_nonzero`.
    pub fn condition(&self) -> f64 {
        self.sigma_max / self.sigma_min_nonzero
    }

    pub fn nonzero_values(&self) -> &[f64] {
        &self.singular_values[..self.singular_values.len() - self.zero_count]
    }
}

/// Full spectrum of the layer `kernel` applied on `geom`.
pub fn layer_spectrum(kernel: &KernelTensor, geom: &ConvGeometry, unit_eps: f64) -> Result<SpectrumReport> {
    let dense = DbtMatrix::build(kernel, geom)?.to_dense()?;
    let values = svd_values(&dense)?;
    Ok(SpectrumReport::from_values(values, unit_eps, Some(geom.into())))
}
