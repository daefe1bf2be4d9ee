//! Orthogonality regularizers for convolution kernels.
//!
//! The conv-orthogonal losses compare the self-convolution `Z` of a kernel
//! against a target that is zero except for an identity at the center offset.
//! `Z` lists every inner product between overlapping rows (or columns) of the
//! DBT matrix, so driving it to the target makes the whole layer orthogonal
//! without ever building that matrix. The kernel-orthogonal baselines only
//! look at the center offset.
//!
//! All losses use the squared Frobenius norm.

use std::fmt;

use crate::conv::{self, ConvGeometry};
use crate::dbt::DenseMatrix;
use crate::error::{Error, Result};
use crate::tensor::{gram_schmidt_rows, KernelTensor, Rng, Tensor};

/// Which Gram matrix a loss constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Row,
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrthMode {
    ConvRow,
    ConvCol,
    KernelRow,
    KernelCol,
}

impl OrthMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(OrthMode::ConvRow),
            "col" => Ok(OrthMode::ConvCol),
            "kernel-row" => Ok(OrthMode::KernelRow),
            "kernel-col" => Ok(OrthMode::KernelCol),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected row, col, kernel-row or kernel-col)"
            ))),
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            OrthMode::ConvRow | OrthMode::KernelRow => Orientation::Row,
            OrthMode::ConvCol | OrthMode::KernelCol => Orientation::Col,
        }
    }
}

impl fmt::Display for OrthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrthMode::ConvRow => "row",
            OrthMode::ConvCol => "col",
            OrthMode::KernelRow => "kernel-row",
            OrthMode::KernelCol => "kernel-col",
        })
    }
}

/// Padding that exposes every overlapping filter position to the
/// self-convolution: `floor((k - 1) / S) * S`.
pub fn padding_for(k: usize, stride: usize) -> usize {
    (k - 1) / stride * stride
}

/// Target tensor `[n, n, span, span]`, identity at the center offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthTarget {
    tensor: Tensor,
    center: usize,
}

impl OrthTarget {
    fn centered_identity(n: usize, span: usize) -> Result<Self> {
        let mut tensor = Tensor::zeros(&[n, n, span, span])?;
        let center = span / 2;
        for i in 0..n {
            tensor.data_mut()[((i * n + i) * span + center) * span + center] = 1.0;
        }
        Ok(OrthTarget { tensor, center })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Spatial index of the center offset along either axis.
    pub fn center(&self) -> usize {
        self.center
    }
}

/// Target for the row condition: `[M, M, 2P/S+1, 2P/S+1]`.
pub fn target_row(m_out: usize, pad: usize, stride: usize) -> Result<OrthTarget> {
    if stride == 0 || !pad.is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "padding {pad} is not a multiple of stride {stride}"
        )));
    }
    OrthTarget::centered_identity(m_out, 2 * pad / stride + 1)
}

/// Target for the stride-1 column condition: `[C, C, 2k-1, 2k-1]`.
pub fn target_col(c_in: usize, k: usize) -> Result<OrthTarget> {
    OrthTarget::centered_identity(c_in, 2 * k - 1)
}

#[derive(Debug, Clone)]
pub struct OrthLossReport {
    pub loss: f64,
    pub grad: KernelTensor,
    pub mode: OrthMode,
    /// Weight already folded into `loss` and `grad`; 1 for raw losses.
    pub lambda: f64,
}

impl OrthLossReport {
    /// `||.||_F` rather than its square.
    pub fn unsquared(&self) -> f64 {
        (self.loss / self.lambda).sqrt()
    }

    pub fn weighted(mut self, lambda: f64) -> Self {
        let factor = lambda / self.lambda;
        self.loss *= factor;
        self.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        self.lambda = lambda;
        self
    }
}

/// `||Conv(K, K, pad, stride) - T||^2` and its gradient. The self-convolution
/// is bilinear in `K`, so the gradient is the sum of the filter adjoint and
/// the input adjoint applied to the residual `2 (Z - T)`.
fn self_conv_loss(
    kernel: &KernelTensor,
    pad: usize,
    stride: usize,
    target: &OrthTarget,
) -> Result<(f64, KernelTensor)> {
    let g = conv::self_conv_geometry(kernel, pad, stride)?;
    let z = conv::self_conv(kernel, pad, stride)?;
    debug_assert_eq!(z.shape(), target.tensor().shape());
    let residual: Vec<f64> = z
        .data()
        .iter()
        .zip(target.tensor().data())
        .map(|(a, b)| a - b)
        .collect();
    let loss = residual.iter().map(|r| r * r).sum();
    let scaled: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();

    let m = kernel.m_out();
    let n = kernel.filter_len();
    let block = m * g.h_out() * g.w_out();
    let mut grad = KernelTensor::zeros(m, kernel.c_in(), kernel.k())?;
    for (i, r_i) in scaled.chunks(block).enumerate() {
        conv::accumulate_grad_kernel(kernel.filter(i), r_i, &g, grad.data_mut());
        conv::accumulate_grad_input(kernel.data(), r_i, &g, &mut grad.data_mut()[i * n..(i + 1) * n]);
    }
    Ok((loss, grad))
}

/// Conv-orthogonality loss.
///
/// * `Row`: `Z = Conv(K, K, padding_for(k, S), S)` against the row target.
/// * `Col`: `Z = Conv(K^T, K^T, k - 1, 1)` against the column target; only
///   defined for stride 1.
pub fn conv_orth_loss(
    kernel: &KernelTensor,
    stride: usize,
    orientation: Orientation,
) -> Result<OrthLossReport> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    match orientation {
        Orientation::Row => {
            let pad = padding_for(kernel.k(), stride);
            let target = target_row(kernel.m_out(), pad, stride)?;
            let (loss, grad) = self_conv_loss(kernel, pad, stride, &target)?;
            Ok(OrthLossReport {
                loss,
                grad,
                mode: OrthMode::ConvRow,
                lambda: 1.0,
            })
        }
        Orientation::Col => {
            if stride != 1 {
                return Err(Error::Unsupported(format!(
                    "the column self-convolution condition only holds for stride 1, got stride {stride}"
                )));
            }
            let transposed = conv::transpose_kernel(kernel);
            let target = target_col(kernel.c_in(), kernel.k())?;
            let (loss, grad_t) = self_conv_loss(&transposed, kernel.k() - 1, 1, &target)?;
            Ok(OrthLossReport {
                loss,
                grad: conv::transpose_kernel(&grad_t),
                mode: OrthMode::ConvCol,
                lambda: 1.0,
            })
        }
    }
}

/// Kernel-orthogonality baseline on the `[M, C k^2]` kernel matrix `W`:
/// `||W W^T - I||^2` (row) or `||W^T W - I||^2` (col).
pub fn kernel_orth_loss(kernel: &KernelTensor, orientation: Orientation) -> Result<OrthLossReport> {
    let m = kernel.m_out();
    let n = kernel.filter_len();
    let w = kernel.data();
    let mut grad = KernelTensor::zeros(m, kernel.c_in(), kernel.k())?;
    let mut loss = 0.0;
    match orientation {
        Orientation::Row => {
            // G = W W^T - I; dL/dW = 4 G W
            let mut gram = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    let dot: f64 = kernel.filter(i).iter().zip(kernel.filter(j)).map(|(a, b)| a * b).sum();
                    let d = dot - if i == j { 1.0 } else { 0.0 };
                    gram[i * m + j] = d;
                    loss += d * d;
                }
            }
            let gd = grad.data_mut();
            for i in 0..m {
                for j in 0..m {
                    let coef = 4.0 * gram[i * m + j];
                    for t in 0..n {
                        gd[i * n + t] += coef * w[j * n + t];
                    }
                }
            }
        }
        Orientation::Col => {
            // G = W^T W - I; dL/dW = 4 W G
            let mut gram = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..m).map(|i| w[i * n + a] * w[i * n + b]).sum();
                    let d = dot - if a == b { 1.0 } else { 0.0 };
                    gram[a * n + b] = d;
                    loss += d * d;
                }
            }
            let gd = grad.data_mut();
            for i in 0..m {
                for b in 0..n {
                    let acc: f64 = (0..n).map(|a| w[i * n + a] * gram[a * n + b]).sum();
                    gd[i * n + b] = 4.0 * acc;
                }
            }
        }
    }
    let mode = match orientation {
        Orientation::Row => OrthMode::KernelRow,
        Orientation::Col => OrthMode::KernelCol,
    };
    Ok(OrthLossReport {
        loss,
        grad,
        mode,
        lambda: 1.0,
    })
}

/// Dispatches on any of the four modes.
pub fn orth_loss(kernel: &KernelTensor, stride: usize, mode: OrthMode) -> Result<OrthLossReport> {
    match mode {
        OrthMode::ConvRow | OrthMode::ConvCol => conv_orth_loss(kernel, stride, mode.orientation()),
        OrthMode::KernelRow | OrthMode::KernelCol => kernel_orth_loss(kernel, mode.orientation()),
    }
}

/// Row form for fat layers and for every strided layer; column form for tall
/// stride-1 layers. For a strided tall layer the row loss differs from the
/// column loss of the full matrix by a constant, so its gradient is the same.
pub fn select_orientation(geom: &ConvGeometry) -> Orientation {
    if geom.is_fat() || geom.stride() > 1 {
        Orientation::Row
    } else {
        Orientation::Col
    }
}

/// Row form when `M <= C k^2`, column form otherwise.
pub fn select_kernel_orientation(kernel: &KernelTensor) -> Orientation {
    if kernel.m_out() <= kernel.filter_len() {
        Orientation::Row
    } else {
        Orientation::Col
    }
}

/// Result of [`lemma_gap`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaGap {
    pub l_r: f64,
    pub l_c: f64,
    pub gap: f64,
}

/// `l_r = ||A A^T - I||^2`, `l_c = ||A^T A - I||^2`. The difference always
/// equals `rows - cols`.
pub fn lemma_gap(a: &DenseMatrix) -> LemmaGap {
    let l_r = a.gram_rows().dist_to_identity_sq();
    let l_c = a.transpose().gram_rows().dist_to_identity_sq();
    LemmaGap {
        l_r,
        l_c,
        gap: l_r - l_c,
    }
}

/// `L = L_task + lambda * sum_l L_orth(K_l)`, each layer regularized in the
/// orientation chosen by [`select_orientation`].
pub fn combined_loss(
    task_loss: f64,
    layers: &[(&KernelTensor, ConvGeometry)],
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(task_loss);
    }
    let mut orth = 0.0;
    for (kernel, geom) in layers {
        geom.check_kernel(kernel)?;
        orth += conv_orth_loss(kernel, geom.stride(), select_orientation(geom))?.loss;
    }
    Ok(task_loss + lambda * orth)
}

/// A kernel whose `[M, C k^2]` matrix has orthonormal rows, from seeded
/// Gram–Schmidt. Requires `M <= C k^2`.
pub fn kernel_orthonormal(m_out: usize, c_in: usize, k: usize, seed: u64) -> Result<KernelTensor> {
    let raw = Tensor::randn(&[m_out, c_in * k * k], &mut Rng::new(seed))?;
    let q = gram_schmidt_rows(&raw)?;
    KernelTensor::from_vec(m_out, c_in, k, q.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_1x1(n: usize) -> KernelTensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        KernelTensor::from_vec(n, n, 1, data).unwrap()
    }

    #[test]
    fn padding_examples() {
        assert_eq!(padding_for(3, 1), 2);
        assert_eq!(padding_for(4, 2), 2);
        assert_eq!(padding_for(1, 1), 0);
        assert_eq!(padding_for(3, 3), 0);
        for k in 1..8 {
            for s in 1..5 {
                assert_eq!(padding_for(k, s) % s, 0);
            }
        }
    }

    #[test]
    fn target_shapes() {
        let t = target_row(2, 2, 1).unwrap();
        assert_eq!(t.tensor().shape(), &[2, 2, 5, 5]);
        assert_eq!(t.center(), 2);
        let d = t.tensor().data();
        let at = |i: usize, j: usize| ((i * 2 + j) * 5 + 2) * 5 + 2;
        assert_eq!(d[at(0, 0)], 1.0);
        assert_eq!(d[at(1, 1)], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 2.0);

        let t = target_col(3, 2).unwrap();
        assert_eq!(t.tensor().shape(), &[3, 3, 3, 3]);
        assert_eq!(t.tensor().data().iter().sum::<f64>(), 3.0);

        let t = target_row(1, 0, 1).unwrap();
        assert_eq!(t.tensor().data(), &[1.0]);
        assert!(target_row(2, 1, 2).is_err());
    }

    #[test]
    fn orthogonal_1x1_kernels_have_zero_loss() {
        let k = KernelTensor::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let r = conv_orth_loss(&k, 1, Orientation::Row).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));

        let k = identity_1x1(3);
        for o in [Orientation::Row, Orientation::Col] {
            assert_eq!(conv_orth_loss(&k, 1, o).unwrap().loss, 0.0);
            assert_eq!(kernel_orth_loss(&k, o).unwrap().loss, 0.0);
        }
    }

    #[test]
    fn column_form_rejects_strides() {
        let k = KernelTensor::randn(2, 2, 3, &mut Rng::new(1)).unwrap();
        assert!(matches!(
            conv_orth_loss(&k, 2, Orientation::Col),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn stride_k_matches_kernel_loss() {
        for seed in 0..10 {
            let k = KernelTensor::randn(3, 2, 3, &mut Rng::new(seed)).unwrap();
            let conv = conv_orth_loss(&k, 3, Orientation::Row).unwrap();
            let kern = kernel_orth_loss(&k, Orientation::Row).unwrap();
            assert!((conv.loss - kern.loss).abs() <= 1e-12 * kern.loss.max(1.0));
            assert!(conv.grad.tensor().max_abs_diff(kern.grad.tensor()).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn orthonormal_rows_give_zero_kernel_loss() {
        let k = kernel_orthonormal(4, 2, 3, 17).unwrap();
        assert!(kernel_orth_loss(&k, Orientation::Row).unwrap().loss <= 1e-20);
    }

    #[test]
    fn lemma_examples() {
        let a = DenseMatrix::from_vec(2, 3, vec![1., 0., 0., 0., 1., 0.]).unwrap();
        let g = lemma_gap(&a);
        assert_eq!((g.l_r, g.l_c, g.gap), (0.0, 1.0, -1.0));

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DenseMatrix::from_vec(2, 2, vec![s, -s, s, s]).unwrap();
        let g = lemma_gap(&rot);
        assert!(g.l_r.abs() < 1e-30 && g.l_c.abs() < 1e-30 && g.gap.abs() < 1e-30);
    }

    #[test]
    fn combined_loss_rules() {
        let k = KernelTensor::randn(2, 2, 3, &mut Rng::new(3)).unwrap();
        let g = ConvGeometry::for_kernel(&k, 6, 6, 1, 0).unwrap();
        assert_eq!(combined_loss(1.25, &[(&k, g)], 0.0).unwrap(), 1.25);
        assert!(matches!(combined_loss(1.0, &[(&k, g)], -0.1), Err(Error::Config(_))));
        let row = conv_orth_loss(&k, 1, Orientation::Row).unwrap().loss;
        let total = combined_loss(1.0, &[(&k, g), (&k, g)], 0.1).unwrap();
        assert!((total - (1.0 + 0.2 * row)).abs() < 1e-12);
    }

    #[test]
    fn orientation_selection() {
        let fat = ConvGeometry::new(8, 10, 10, 8, 3, 2, 0).unwrap();
        assert_eq!(select_orientation(&fat), Orientation::Row);
        let tall = ConvGeometry::new(1, 12, 12, 8, 3, 1, 0).unwrap();
        assert_eq!(select_orientation(&tall), Orientation::Col);
        let tall_strided = ConvGeometry::new(1, 12, 12, 16, 3, 2, 0).unwrap();
        assert!(!tall_strided.is_fat());
        assert_eq!(select_orientation(&tall_strided), Orientation::Row);
    }

    #[test]
    fn report_weighting() {
        let k = KernelTensor::randn(2, 1, 2, &mut Rng::new(2)).unwrap();
        let r = conv_orth_loss(&k, 1, Orientation::Row).unwrap();
        let raw = r.loss;
        let w = r.weighted(0.1);
        assert!((w.loss - 0.1 * raw).abs() < 1e-15);
        assert!((w.unsquared() - raw.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mode_parsing() {
        for s in ["row", "col", "kernel-row", "kernel-col"] {
            assert_eq!(OrthMode::parse(s).unwrap().to_string(), s);
        }
        assert!(OrthMode::parse("diag").is_err());
    }
}
