//! Brute-force comparisons against the explicit DBT matrix. Each function
//! returns the largest absolute deviation it found.

use crate::conv::{conv2d, self_conv, transpose_kernel, ConvGeometry};
use crate::dbt::DbtMatrix;
use crate::error::Result;
use crate::orthreg::padding_for;
use crate::tensor::{KernelTensor, Rng, Tensor};

/// `conv2d(x, K)` against `K_dbt * x` on `trials` random inputs.
pub fn conv_vs_matvec(kernel: &KernelTensor, geom: &ConvGeometry, trials: usize, rng: &mut Rng) -> Result<f64> {
    let dbt = DbtMatrix::build(kernel, geom)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::randn(&geom.input_shape(), rng)?;
        let y = conv2d(&x, kernel, geom.stride(), geom.pad())?;
        let y_dbt = dbt.matvec(x.data())?;
        for (a, b) in y.data().iter().zip(&y_dbt) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Smallest square input whose DBT has a row at `(r, r)` with every
/// overlapping neighbour present, `r = P / S`.
pub fn row_check_geometry(kernel: &KernelTensor, stride: usize) -> Result<ConvGeometry> {
    let pad = padding_for(kernel.k(), stride);
    let side = 2 * pad + kernel.k();
    ConvGeometry::for_kernel(kernel, side, side, stride, 0)
}

/// Every entry `Z[i, j, u, v]` of the row self-convolution against the DBT
/// row inner product `<row(i, r, r), row(j, u, v)>` with `r = P / S`.
pub fn row_condition(kernel: &KernelTensor, stride: usize) -> Result<f64> {
    let pad = padding_for(kernel.k(), stride);
    let z = self_conv(kernel, pad, stride)?;
    let geom = row_check_geometry(kernel, stride)?;
    let dbt = DbtMatrix::build(kernel, &geom)?;
    let gram = dbt.row_gram()?;
    let m = kernel.m_out();
    let span = 2 * pad / stride + 1;
    let center = pad / stride;
    let mut worst = 0.0f64;
    for i in 0..m {
        let r = dbt.row_index(i, center, center);
        for j in 0..m {
            for u in 0..span {
                for v in 0..span {
                    let zv = z.data()[((i * m + j) * span + u) * span + v];
                    worst = worst.max((zv - gram.get(r, dbt.row_index(j, u, v))).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Smallest square input with an interior column at `(c, c)`,
/// `c = 2k - 2`, whose overlapping neighbours are interior as well.
pub fn col_check_geometry(kernel: &KernelTensor) -> Result<ConvGeometry> {
    let side = 4 * kernel.k() - 3;
    ConvGeometry::for_kernel(kernel, side, side, 1, 0)
}

/// Every entry of `Conv(K^T, K^T, k - 1, 1)` against the DBT column inner
/// product `<col(i, c, c), col(j, c + u - k + 1, c + v - k + 1)>`.
pub fn col_condition(kernel: &KernelTensor) -> Result<f64> {
    let k = kernel.k();
    let z = self_conv(&transpose_kernel(kernel), k - 1, 1)?;
    let geom = col_check_geometry(kernel)?;
    let dbt = DbtMatrix::build(kernel, &geom)?;
    let gram = dbt.col_gram()?;
    let n = kernel.c_in();
    let span = 2 * k - 1;
    let center = 2 * k - 2;
    let mut worst = 0.0f64;
    for i in 0..n {
        let a = dbt.col_index(i, center, center);
        for j in 0..n {
            for u in 0..span {
                for v in 0..span {
                    let b = dbt.col_index(j, center + u + 1 - k, center + v + 1 - k);
                    let zv = z.data()[((i * n + j) * span + u) * span + v];
                    worst = worst.max((zv - gram.get(a, b)).abs());
                }
            }
        }
    }
    Ok(worst)
}
