//! Direct 2D convolution in the cross-correlation convention (no kernel flip,
//! zero padding), its two adjoints, and the kernel self-convolution.

use crate::error::{Error, Result};
use crate::tensor::{KernelTensor, Tensor};

/// Shape contract of one convolutional layer applied to a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    m_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        m_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if c_in == 0 || h == 0 || w == 0 || m_out == 0 || k == 0 {
            return Err(Error::Geometry(format!(
                "all extents must be positive (C={c_in}, H={h}, W={w}, M={m_out}, k={k})"
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be at least 1".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Geometry(format!(
                "kernel {k} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            m_out,
            k,
            stride,
            pad,
        })
    }

    /// Geometry of `kernel` applied to a `[C, H, W]` input.
    pub fn for_kernel(
        kernel: &KernelTensor,
        h: usize,
        w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::new(kernel.c_in(), h, w, kernel.m_out(), kernel.k(), stride, pad)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn m_out(&self) -> usize {
        self.m_out
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.m_out * self.h_out() * self.w_out()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.m_out, self.h_out(), self.w_out()]
    }

    /// `M H' W' <= C H W`: the DBT matrix has at least as many columns as rows.
    pub fn is_fat(&self) -> bool {
        self.output_len() <= self.input_len()
    }

    pub(crate) fn check_kernel(&self, kernel: &KernelTensor) -> Result<()> {
        if kernel.m_out() != self.m_out || kernel.c_in() != self.c_in || kernel.k() != self.k {
            return Err(Error::shape(format!(
                "kernel [{}, {}, {k}, {k}] does not match geometry (M={}, C={}, k={})",
                kernel.m_out(),
                kernel.c_in(),
                self.m_out,
                self.c_in,
                self.k,
                k = kernel.k()
            )));
        }
        Ok(())
    }

    /// Input offset `u S + p - pad` along one axis, if it lands inside the input.
    #[inline]
    fn tap(&self, out_pos: usize, kernel_pos: usize, extent: usize) -> Option<usize> {
        (out_pos * self.stride + kernel_pos)
            .checked_sub(self.pad)
            .filter(|&i| i < extent)
    }
}

// Slice kernels shared by the public wrappers and the regularizer gradients.
// `x` is [C, H, W], `kernel` is [M, C, k, k], `out` is [M, H', W'].

pub(crate) fn correlate(x: &[f64], kernel: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    for m in 0..g.m_out {
        for u in 0..ho {
            for v in 0..wo {
                let mut acc = 0.0;
                for c in 0..g.c_in {
                    for p in 0..k {
                        let Some(h) = g.tap(u, p, g.h) else { continue };
                        let xrow = (c * g.h + h) * g.w;
                        let krow = ((m * g.c_in + c) * k + p) * k;
                        for q in 0..k {
                            if let Some(w) = g.tap(v, q, g.w) {
                                acc += kernel[krow + q] * x[xrow + w];
                            }
                        }
                    }
                }
                out[(m * ho + u) * wo + v] = acc;
            }
        }
    }
}

pub(crate) fn accumulate_grad_kernel(x: &[f64], d_out: &[f64], g: &ConvGeometry, dk: &mut [f64]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    for m in 0..g.m_out {
        for c in 0..g.c_in {
            for p in 0..k {
                for q in 0..k {
                    let mut acc = 0.0;
                    for u in 0..ho {
                        let Some(h) = g.tap(u, p, g.h) else { continue };
                        for v in 0..wo {
                            if let Some(w) = g.tap(v, q, g.w) {
                                acc += d_out[(m * ho + u) * wo + v] * x[(c * g.h + h) * g.w + w];
                            }
                        }
                    }
                    dk[((m * g.c_in + c) * k + p) * k + q] += acc;
                }
            }
        }
    }
}

pub(crate) fn accumulate_grad_input(
    kernel: &[f64],
    d_out: &[f64],
    g: &ConvGeometry,
    dx: &mut [f64],
) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.k);
    for m in 0..g.m_out {
        for u in 0..ho {
            for v in 0..wo {
                let d = d_out[(m * ho + u) * wo + v];
                if d == 0.0 {
                    continue;
                }
                for c in 0..g.c_in {
                    for p in 0..k {
                        let Some(h) = g.tap(u, p, g.h) else { continue };
                        for q in 0..k {
                            if let Some(w) = g.tap(v, q, g.w) {
                                dx[(c * g.h + h) * g.w + w] += d * kernel[((m * g.c_in + c) * k + p) * k + q];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_input(x: &Tensor, g: &ConvGeometry) -> Result<()> {
    if x.shape() != g.input_shape() {
        return Err(Error::shape(format!(
            "input shape {:?} does not match geometry {:?}",
            x.shape(),
            g.input_shape()
        )));
    }
    Ok(())
}

fn check_d_out(d_out: &Tensor, g: &ConvGeometry) -> Result<()> {
    if d_out.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "output gradient shape {:?} does not match {:?}",
            d_out.shape(),
            g.output_shape()
        )));
    }
    Ok(())
}

/// `Y[m,u,v] = sum_{c,p,q} K[m,c,p,q] * X_pad[c, uS+p, vS+q]`.
pub fn conv2d(x: &Tensor, kernel: &KernelTensor, stride: usize, pad: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("input must be [C, H, W], got {s:?}")));
    }
    if s[0] != kernel.c_in() {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            s[0],
            kernel.c_in()
        )));
    }
    let g = ConvGeometry::for_kernel(kernel, s[1], s[2], stride, pad)?;
    let mut out = Tensor::zeros(&g.output_shape())?;
    correlate(x.data(), kernel.data(), &g, out.data_mut());
    Ok(out)
}

/// Gradient of `sum(d_out * conv2d(x, K))` with respect to `K`.
pub fn conv2d_grad_kernel(x: &Tensor, d_out: &Tensor, g: &ConvGeometry) -> Result<KernelTensor> {
    check_input(x, g)?;
    check_d_out(d_out, g)?;
    let mut dk = KernelTensor::zeros(g.m_out, g.c_in, g.k)?;
    accumulate_grad_kernel(x.data(), d_out.data(), g, dk.data_mut());
    Ok(dk)
}

/// Gradient of `sum(d_out * conv2d(x, K))` with respect to `x`.
pub fn conv2d_grad_input(kernel: &KernelTensor, d_out: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    g.check_kernel(kernel)?;
    check_d_out(d_out, g)?;
    let mut dx = Tensor::zeros(&g.input_shape())?;
    accumulate_grad_input(kernel.data(), d_out.data(), g, dx.data_mut());
    Ok(dx)
}

/// Geometry of the self-convolution: each `[C, k, k]` filter is an input.
pub(crate) fn self_conv_geometry(kernel: &KernelTensor, pad: usize, stride: usize) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    if !pad.is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "self-convolution padding {pad} is not a multiple of stride {stride}"
        )));
    }
    ConvGeometry::for_kernel(kernel, kernel.k(), kernel.k(), stride, pad)
}

/// `Conv(K, K, padding = pad, stride)`: every filter `K_i` is convolved with
/// the whole stack. Output `Z[i, j, u, v]` has shape `[M, M, 2P/S+1, 2P/S+1]`
/// and `Z[i, j, P/S, P/S] = <K_i, K_j>`.
pub fn self_conv(kernel: &KernelTensor, pad: usize, stride: usize) -> Result<Tensor> {
    let g = self_conv_geometry(kernel, pad, stride)?;
    let m = kernel.m_out();
    let span = g.h_out();
    debug_assert_eq!(span, 2 * pad / stride + 1);
    let block = m * span * span;
    let mut out = Tensor::zeros(&[m, m, span, span])?;
    for (i, chunk) in out.data_mut().chunks_mut(block).enumerate() {
        correlate(kernel.filter(i), kernel.data(), &g, chunk);
    }
    Ok(out)
}

/// Kernel of the adjoint operator: `out[c, m, p, q] = K[m, c, k-1-p, k-1-q]`.
///
/// The 180 degree spatial flip makes the DBT matrix of the result the
/// transpose of the DBT matrix of `kernel` (stride 1, full padding), so the
/// column-form self-convolution lines up index-for-index with `col_gram`.
pub fn transpose_kernel(kernel: &KernelTensor) -> KernelTensor {
    let (m_out, c_in, k) = (kernel.m_out(), kernel.c_in(), kernel.k());
    let mut data = vec![0.0; kernel.data().len()];
    for m in 0..m_out {
        for c in 0..c_in {
            for p in 0..k {
                for q in 0..k {
                    data[((c * m_out + m) * k + p) * k + q] = kernel.at(m, c, k - 1 - p, k - 1 - q);
                }
            }
        }
    }
    KernelTensor::from_vec(c_in, m_out, k, data).expect("transposed shape is valid")
}

/// Axis swap only, without the spatial flip.
pub fn swap_kernel_axes(kernel: &KernelTensor) -> KernelTensor {
    let (m_out, c_in, k) = (kernel.m_out(), kernel.c_in(), kernel.k());
    let mut data = vec![0.0; kernel.data().len()];
    for m in 0..m_out {
        for c in 0..c_in {
            let src = kernel.index(m, c, 0, 0);
            let dst = (c * m_out + m) * k * k;
            data[dst..dst + k * k].copy_from_slice(&kernel.data()[src..src + k * k]);
        }
    }
    KernelTensor::from_vec(c_in, m_out, k, data).expect("transposed shape is valid")
}
