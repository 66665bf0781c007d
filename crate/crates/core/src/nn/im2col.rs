//! Convolution as patch extraction plus a matmul, one sample at a time.
//!
//! Forward and both gradients are custom ops that work per sample, so the
//! patch matrix of one image stays in cache instead of materializing a
//! batch-sized column tensor. Each product is a single call into `gemm`.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use gemm::{gemm, Parallelism};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        let span = self.dil * (self.k - 1) + 1;
        (
            (self.h + 2 * self.pad - span) / self.stride + 1,
            (self.w + 2 * self.pad - span) / self.stride + 1,
        )
    }

    fn out_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Patches coincide with the input itself.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// For each kernel offset, the valid output range along one axis and the input index of its first element.
    fn axis(&self, size: usize, out: usize, koff: usize) -> (usize, usize) {
        // valid o: 0 <= o*stride + koff*dil - pad < size
        let shift = (koff * self.dil) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = ((size as isize - shift + s - 1) / s).clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    /// `f(src_index, dst_index, run_length)` over one image, in stride-1 runs
    /// where possible and per element otherwise.
    fn for_each<F: FnMut(usize, usize, usize)>(&self, mut f: F) {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        for ci in 0..self.c {
            for ky in 0..self.k {
                let (ylo, yhi) = self.axis(self.h, ho, ky);
                for kx in 0..self.k {
                    let (xlo, xhi) = self.axis(self.w, wo, kx);
                    if xlo >= xhi {
                        continue;
                    }
                    let dst_base = (ci * kk + ky * self.k + kx) * ho * wo;
                    let src_base = ci * self.h * self.w;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky * self.dil - self.pad;
                        let ix0 = xlo * self.stride + kx * self.dil - self.pad;
                        let src = src_base + iy * self.w + ix0;
                        let dst = dst_base + oy * wo + xlo;
                        if self.stride == 1 {
                            f(src, dst, xhi - xlo);
                        } else {
                            for j in 0..xhi - xlo {
                                f(src + j * self.stride, dst + j, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Zeroes exactly the patch entries that fall outside the image.
    fn zero_padding<T: Elem>(&self, cols: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let zero = T::default();
        for (r, block) in cols.chunks_mut(ho * wo).enumerate() {
            let (ky, kx) = ((r / self.k) % self.k, r % self.k);
            let (ylo, yhi) = self.axis(self.h, ho, ky);
            let (xlo, xhi) = self.axis(self.w, wo, kx);
            if xlo >= xhi {
                block.fill(zero);
                continue;
            }
            block[..ylo * wo].fill(zero);
            block[yhi * wo..].fill(zero);
            for row in block[ylo * wo..yhi * wo].chunks_mut(wo) {
                row[..xlo].fill(zero);
                row[xhi..].fill(zero);
            }
        }
    }

    /// Patch matrix `[C*k*k, Ho*Wo]` of one image; padding stays zero.
    fn im2col<T: Elem>(&self, src: &[T], cols: &mut [T]) {
        if self.pad > 0 {
            self.zero_padding(cols);
        }
        self.for_each(|s, d, n| cols[d..d + n].copy_from_slice(&src[s..s + n]));
    }

    fn col2im<T: Elem>(&self, cols: &[T], dst: &mut [T]) {
        self.for_each(|s, d, n| {
            for (o, &v) in dst[s..s + n].iter_mut().zip(&cols[d..d + n]) {
                *o += v;
            }
        });
    }
}

trait Elem: Copy + Default + AddAssign + 'static {
    const ONE: Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

/// Row-major matrix view: pointer plus row and column strides.
#[derive(Clone, Copy)]
struct Mat<T> {
    ptr: *const T,
    rs: isize,
    cs: isize,
}

impl<T> Mat<T> {
    fn rows(s: &[T], cols: usize) -> Self {
        Self {
            ptr: s.as_ptr(),
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    fn transposed(s: &[T], cols: usize) -> Self {
        Self {
            ptr: s.as_ptr(),
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `dst[m x n] (+)= lhs[m x k] * rhs[k x n]`, with `dst` row-major.
fn matmul<T: Elem>(dst: &mut [T], m: usize, n: usize, k: usize, lhs: Mat<T>, rhs: Mat<T>, accumulate: bool) {
    assert!(dst.len() >= m * n);
    // SAFETY: dst holds m*n elements; lhs and rhs views are built from slices
    // covering the m*k and k*n elements their strides address.
    unsafe {
        gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.ptr,
            lhs.cs,
            lhs.rs,
            rhs.ptr,
            rhs.cs,
            rhs.rs,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn conv_fwd<T: Elem>(x: &[T], w: &[T], g: &Geometry, batch: usize, c_out: usize) -> Vec<T> {
    let (p, l) = (g.patch_len(), g.out_len());
    let mut y = vec![T::default(); batch * c_out * l];
    let mut cols = vec![T::default(); if g.pointwise() { 0 } else { p * l }];
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let rhs = if g.pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        matmul(&mut y[b * c_out * l..], c_out, l, p, Mat::rows(w, p), Mat::rows(rhs, l), false);
    }
    y
}

/// `dL/dx` from `dL/dy [B, C_out, L]` and the weight `[C_out, C*k*k]`.
fn conv_grad_input<T: Elem>(gy: &[T], w: &[T], g: &Geometry, batch: usize, c_out: usize) -> Vec<T> {
    let (p, l) = (g.patch_len(), g.out_len());
    let mut gx = vec![T::default(); batch * g.in_len()];
    let mut cols = vec![T::default(); p * l];
    for b in 0..batch {
        let gyb = &gy[b * c_out * l..(b + 1) * c_out * l];
        let gxb = &mut gx[b * g.in_len()..(b + 1) * g.in_len()];
        if g.pointwise() {
            matmul(gxb, p, l, c_out, Mat::transposed(w, p), Mat::rows(gyb, l), false);
        } else {
            matmul(&mut cols, p, l, c_out, Mat::transposed(w, p), Mat::rows(gyb, l), false);
            g.col2im(&cols, gxb);
        }
    }
    gx
}

/// `dL/dw [C_out, C*k*k]`, summed over the batch.
fn conv_grad_weight<T: Elem>(x: &[T], gy: &[T], g: &Geometry, batch: usize, c_out: usize) -> Vec<T> {
    let (p, l) = (g.patch_len(), g.out_len());
    let mut gw = vec![T::default(); c_out * p];
    let mut cols = vec![T::default(); if g.pointwise() { 0 } else { p * l }];
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let patches = if g.pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        let gyb = &gy[b * c_out * l..(b + 1) * c_out * l];
        matmul(&mut gw, c_out, p, l, Mat::rows(gyb, l), Mat::transposed(patches, l), b > 0);
    }
    gw
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// Applies `f` to two storages of the same float dtype.
macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(u), CpuStorage::F32(v)) => {
                let ($a, $b) = (contiguous(u, $l1, $name)?, contiguous(v, $l2, $name)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v)) => {
                let ($a, $b) = (contiguous(u, $l1, $name)?, contiguous(v, $l2, $name)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported or mismatched dtypes", $name),
        }
    };
}

/// `(x [B, C, H, W], w [C_out, C*k*k]) -> y [B, C_out, Ho, Wo]`.
struct Conv(Geometry);
/// `(dy, w) -> dx`.
struct ConvGradInput(Geometry);
/// `(x, dy) -> dw`.
struct ConvGradWeight(Geometry);

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c_out) = (l1.dims()[0], l2.dims()[0]);
        let (ho, wo) = g.out_hw();
        let out = dispatch2!("conv", s1, l1, s2, l2, |x, w| conv_fwd(x, w, g, b, c_out));
        Ok((out, Shape::from((b, c_out, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c_out) = (l1.dims()[0], l1.dims()[1]);
        let out = dispatch2!("conv-grad-input", s1, l1, s2, l2, |gy, w| conv_grad_input(gy, w, g, b, c_out));
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c_out) = (l1.dims()[0], l2.dims()[1]);
        let out = dispatch2!("conv-grad-weight", s1, l1, s2, l2, |x, gy| conv_grad_weight(x, gy, g, b, c_out));
        Ok((out, Shape::from((c_out, g.patch_len()))))
    }
}

/// `[B, C, H, W]` input, `[C_out, C, k, k]` weight, zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c != c_in || k != k2 || stride == 0 || dilation == 0 {
        return Err(shape_err!("conv2d: input {:?} incompatible with weight {:?}", x.dims(), weight.dims()));
    }
    let span = dilation * (k - 1) + 1;
    if h + 2 * padding < span || w + 2 * padding < span {
        return Err(shape_err!("conv2d: {h}x{w} input smaller than the {span}x{span} receptive field"));
    }
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad: padding,
        dil: dilation,
    };
    let w2 = weight.reshape((c_out, c * k * k))?.contiguous()?;
    Ok(x.contiguous()?.apply_op2(&w2, Conv(g))?)
}
