//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerical code.
#![allow(dead_code)]

use orthoconv::{KernelTensor, Tensor};

/// `K[m, c, a, b]`.
pub fn kat(k: &KernelTensor, m: usize, c: usize, a: usize, b: usize) -> f64 {
    let kk = k.k();
    k.data()[((m * k.c_in() + c) * kk + a) * kk + b]
}

/// Direct 7-loop zero-padded cross-correlation.
pub fn naive_conv(x: &Tensor, k: &KernelTensor, stride: usize, pad: usize) -> Tensor {
    let [c_in, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let kk = k.k();
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; k.m_out() * ho * wo];
    for m in 0..k.m_out() {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = 0.0;
                for c in 0..c_in {
                    for a in 0..kk {
                        for b in 0..kk {
                            let ih = (oh * stride + a) as isize - pad as isize;
                            let iw = (ow * stride + b) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                s += kat(k, m, c, a, b) * x.data()[(c * h + ih as usize) * w + iw as usize];
                            }
                        }
                    }
                }
                out[(m * ho + oh) * wo + ow] = s;
            }
        }
    }
    Tensor::from_vec(&[k.m_out(), ho, wo], out).unwrap()
}

/// Dense DBT matrix built column by column from one-hot inputs.
pub fn dense_dbt(k: &KernelTensor, h: usize, w: usize, stride: usize, pad: usize) -> (usize, usize, Vec<f64>) {
    let n = k.c_in() * h * w;
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let x = Tensor::from_vec(&[k.c_in(), h, w], e).unwrap();
        cols.push(naive_conv(&x, k, stride, pad).into_data());
    }
    let rows = cols[0].len();
    let mut a = vec![0.0; rows * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            a[i * n + j] = v;
        }
    }
    (rows, n, a)
}

fn shifted(k: &KernelTensor, m: usize, c: usize, a: isize, b: isize) -> f64 {
    let kk = k.k() as isize;
    if a < 0 || b < 0 || a >= kk || b >= kk {
        0.0
    } else {
        kat(k, m, c, a as usize, b as usize)
    }
}

/// Row loss from shifted-filter overlaps: the inner product of the filter
/// rows of output channels `i` and `j` whose windows sit `(du, dv) * stride`
/// apart, summed over every offset at which they can overlap.
pub fn row_loss_bruteforce(k: &KernelTensor, stride: usize) -> f64 {
    let kk = k.k() as isize;
    let reach = (kk - 1) / stride as isize;
    let mut loss = 0.0;
    for i in 0..k.m_out() {
        for j in 0..k.m_out() {
            for du in -reach..=reach {
                for dv in -reach..=reach {
                    let mut z = 0.0;
                    for c in 0..k.c_in() {
                        for a in 0..kk {
                            for b in 0..kk {
                                z += shifted(k, i, c, a, b)
                                    * shifted(k, j, c, a - du * stride as isize, b - dv * stride as isize);
                            }
                        }
                    }
                    let t = if i == j && du == 0 && dv == 0 { 1.0 } else { 0.0 };
                    loss += (z - t) * (z - t);
                }
            }
        }
    }
    loss
}

/// Column loss at stride 1: overlaps between input-channel slices shifted by
/// up to `k - 1` pixels.
pub fn col_loss_bruteforce(k: &KernelTensor) -> f64 {
    let kk = k.k() as isize;
    let mut loss = 0.0;
    for i in 0..k.c_in() {
        for j in 0..k.c_in() {
            for du in -(kk - 1)..kk {
                for dv in -(kk - 1)..kk {
                    let mut z = 0.0;
                    for m in 0..k.m_out() {
                        for a in 0..kk {
                            for b in 0..kk {
                                z += shifted(k, m, i, a, b) * shifted(k, m, j, a + du, b + dv);
                            }
                        }
                    }
                    let t = if i == j && du == 0 && dv == 0 { 1.0 } else { 0.0 };
                    loss += (z - t) * (z - t);
                }
            }
        }
    }
    loss
}

/// `||W W^T - I||^2` (rows) or `||W^T W - I||^2` (columns) for the flattened
/// `M x (C k k)` kernel matrix.
pub fn kernel_loss_bruteforce(k: &KernelTensor, rows: bool) -> f64 {
    let m = k.m_out();
    let n = k.c_in() * k.k() * k.k();
    let d = k.data();
    let mut loss = 0.0;
    if rows {
        for i in 0..m {
            for j in 0..m {
                let g: f64 = (0..n).map(|t| d[i * n + t] * d[j * n + t]).sum();
                let t = if i == j { 1.0 } else { 0.0 };
                loss += (g - t) * (g - t);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                let g: f64 = (0..m).map(|r| d[r * n + i] * d[r * n + j]).sum();
                let t = if i == j { 1.0 } else { 0.0 };
                loss += (g - t) * (g - t);
            }
        }
    }
    loss
}

/// Central differences with step `h`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `A A^T` for a row-major `rows x cols` matrix.
pub fn aat(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            g[i * rows + j] = (0..cols).map(|t| a[i * cols + t] * a[j * cols + t]).sum();
        }
    }
    g
}

/// `A^T A`.
pub fn ata(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows).map(|t| a[t * cols + i] * a[t * cols + j]).sum();
        }
    }
    g
}
