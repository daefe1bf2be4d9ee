//! The doubly block-Toeplitz matrix of a convolution: `flatten(conv2d(x, K))
//! == K_dbt * flatten(x)`. Row `(i, h', w')` holds filter `K_i` placed at
//! output position `(h', w')`; column `(c, h, w)` is the response to a one-hot
//! input at channel `c`, pixel `(h, w)`.

use rayon::prelude::*;

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::KernelTensor;

/// Default limit on `rows * cols` for dense materialization.
const RMATVEC_CHUNKS: usize = 16;

pub const DEFAULT_DENSE_CAP: usize = 4_000_000;

/// Sparse DBT matrix in coordinate form. Triplets are sorted by `(row, col)`
/// and `row_ptr` indexes them by row.
#[derive(Debug, Clone)]
pub struct DbtMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
    row_ptr: Vec<usize>,
    geom: ConvGeometry,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `A A^T`, computed row pair by row pair.
    pub fn gram_rows(&self) -> DenseMatrix {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        out.data.par_chunks_mut(n).enumerate().for_each(|(i, dst)| {
            let ri = self.row(i);
            for (j, d) in dst.iter_mut().enumerate() {
                *d = ri.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
            }
        });
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.data[i * self.cols + l];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(l);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
            }
        }
        Ok(out)
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `||A - I||_F^2` for a square matrix.
    pub fn dist_to_identity_sq(&self) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        let mut acc = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let d = self.get(r, c) - if r == c { 1.0 } else { 0.0 };
                acc += d * d;
            }
        }
        acc
    }
}

fn check_cap(rows: usize, cols: usize, cap: usize) -> Result<()> {
    let required = rows.saturating_mul(cols);
    if required > cap {
        return Err(Error::Capacity { required, cap });
    }
    Ok(())
}

impl DbtMatrix {
    /// Taps that fall into the layer padding are omitted. Entries are stored
    /// for every structural tap, including kernel values that happen to be 0.
    pub fn build(kernel: &KernelTensor, geom: &ConvGeometry) -> Result<Self> {
        geom.check_kernel(kernel)?;
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let (h, w, k, s, pad) = (geom.h(), geom.w(), geom.k(), geom.stride(), geom.pad());
        let rows = geom.output_len();
        let cols = geom.input_len();
        let mut entries = Vec::with_capacity(rows * geom.c_in() * k * k);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        for i in 0..geom.m_out() {
            for u in 0..ho {
                for v in 0..wo {
                    let row = (i * ho + u) * wo + v;
                    for c in 0..geom.c_in() {
                        for p in 0..k {
                            let Some(hh) = (u * s + p).checked_sub(pad).filter(|&x| x < h) else {
                                continue;
                            };
                            for q in 0..k {
                                let Some(ww) = (v * s + q).checked_sub(pad).filter(|&x| x < w)
                                else {
                                    continue;
                                };
                                entries.push((row, (c * h + hh) * w + ww, kernel.at(i, c, p, q)));
                            }
                        }
                    }
                    row_ptr.push(entries.len());
                }
            }
        }
        Ok(DbtMatrix {
            rows,
            cols,
            entries,
            row_ptr,
            geom: *geom,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn row_entries(&self, row: usize) -> &[(usize, usize, f64)] {
        &self.entries[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub fn nnz_in_row(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    /// Row index of output `(i, h', w')`.
    pub fn row_index(&self, i: usize, h_out: usize, w_out: usize) -> usize {
        (i * self.geom.h_out() + h_out) * self.geom.w_out() + w_out
    }

    /// Column index of input `(c, h, w)`.
    pub fn col_index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.geom.h() + h) * self.geom.w() + w
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.entries.iter().map(|e| e.2 * e.2).sum()
    }

    /// `y = K x`. Each output is a sequential sum over its row, so the result
    /// does not depend on how rows are split among threads.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec needs a vector of length {}, got {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .into_par_iter()
            .map(|r| self.row_entries(r).iter().map(|&(_, c, v)| v * x[c]).sum())
            .collect())
    }

    /// `x = K^T y`.
    pub fn rmatvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "transpose matvec needs a vector of length {}, got {}",
                self.rows,
                y.len()
            )));
        }
        // fixed chunk count so the summation order is independent of the pool size
        let chunk = self.entries.len().div_ceil(RMATVEC_CHUNKS).max(1);
        let partials: Vec<Vec<f64>> = self
            .entries
            .par_chunks(chunk)
            .map(|part| {
                let mut acc = vec![0.0; self.cols];
                for &(r, c, v) in part {
                    acc[c] += v * y[r];
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; self.cols];
        for part in &partials {
            out.iter_mut().zip(part).for_each(|(o, p)| *o += p);
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Result<DenseMatrix> {
        self.to_dense_capped(DEFAULT_DENSE_CAP)
    }

    pub fn to_dense_capped(&self, cap: usize) -> Result<DenseMatrix> {
        check_cap(self.rows, self.cols, cap)?;
        let mut dense = DenseMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            dense.data[r * self.cols + c] = v;
        }
        Ok(dense)
    }

    /// `K K^T`.
    pub fn row_gram(&self) -> Result<DenseMatrix> {
        self.row_gram_capped(DEFAULT_DENSE_CAP)
    }

    pub fn row_gram_capped(&self, cap: usize) -> Result<DenseMatrix> {
        check_cap(self.rows, self.rows, cap)?;
        Ok(self.to_dense_capped(cap)?.gram_rows())
    }

    /// `K^T K`.
    pub fn col_gram(&self) -> Result<DenseMatrix> {
        self.col_gram_capped(DEFAULT_DENSE_CAP)
    }

    pub fn col_gram_capped(&self, cap: usize) -> Result<DenseMatrix> {
        check_cap(self.cols, self.cols, cap)?;
        Ok(self.to_dense_capped(cap)?.transpose().gram_rows())
    }

    /// Column `(c, h, w)`, i.e. `K e_chw`.
    pub fn extract_column(&self, c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
        let g = &self.geom;
        if c >= g.c_in() || h >= g.h() || w >= g.w() {
            return Err(Error::Index(format!(
                "column ({c}, {h}, {w}) outside input [{}, {}, {}]",
                g.c_in(),
                g.h(),
                g.w()
            )));
        }
        let col = self.col_index(c, h, w);
        let mut out = vec![0.0; self.rows];
        for &(r, cc, v) in &self.entries {
            if cc == col {
                out[r] = v;
            }
        }
        Ok(out)
    }
}
