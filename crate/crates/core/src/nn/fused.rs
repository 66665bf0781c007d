//! Single-pass kernels for ops whose composed backward dominates CPU time:
//! SiLU, last-axis softmax and per-channel bias addition.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

trait Float: Copy + Default + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn sigmoid(self) -> Self;
    fn silu(self) -> Self;
    /// `g * d silu / dx` at `self`.
    fn silu_grad(self, g: Self) -> Self;
}

macro_rules! float_impl {
    ($t:ty) => {
        impl Float for $t {
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn sigmoid(self) -> Self {
                // exp(-x) overflows to inf for very negative x, giving exactly 0
                1.0 / (1.0 + (-self).exp())
            }
            fn silu(self) -> Self {
                self * self.sigmoid()
            }
            fn silu_grad(self, g: Self) -> Self {
                let s = self.sigmoid();
                g * s * (1.0 + self * (1.0 - s))
            }
        }
    };
}

float_impl!(f32);
float_impl!(f64);

fn contiguous<'a, T>(v: &'a [T], l: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

macro_rules! unary {
    ($name:expr, $s:expr, $l:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(u) => {
                let $a = contiguous(u, $l, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(u) => {
                let $a = contiguous(u, $l, $name)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    };
}

macro_rules! binary {
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

struct Silu;
struct SiluGrad;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: Float>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| v.silu()).collect()
        }
        Ok((unary!("silu", s, l, |x| f(x)), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: Float>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter().zip(g).map(|(&v, &g)| v.silu_grad(g)).collect()
        }
        Ok((binary!("silu-grad", s1, l1, s2, l2, |x, g| f(x, g)), l1.shape().clone()))
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l.dims().last().copied().unwrap_or(1).max(1);
        fn f<T: Float>(x: &[T], n: usize) -> Vec<T> {
            let mut out = vec![T::default(); x.len()];
            for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
                let mut sum = 0.0;
                let e: Vec<f64> = row
                    .iter()
                    .map(|v| {
                        let e = (v.to_f64() - max).exp();
                        sum += e;
                        e
                    })
                    .collect();
                for (d, e) in dst.iter_mut().zip(e) {
                    *d = T::from_f64(e / sum);
                }
            }
            out
        }
        Ok((unary!("softmax-last", s, l, |x| f(x, n)), l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l1.dims().last().copied().unwrap_or(1).max(1);
        fn f<T: Float>(y: &[T], g: &[T], n: usize) -> Vec<T> {
            let mut out = vec![T::default(); y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                for ((d, a), b) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = T::from_f64(a.to_f64() * (b.to_f64() - dot));
                }
            }
            out
        }
        Ok((binary!("softmax-last-grad", s1, l1, s2, l2, |y, g| f(y, g, n)), l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

/// Per-channel bias on `[B, C, ...]`.
struct ChannelBias;
/// Sums `[B, C, ...]` down to `[C]`.
struct ChannelSum;

fn channels(l: &Layout) -> (usize, usize, usize) {
    let d = l.dims();
    let inner: usize = d[2..].iter().product();
    (d[0], d[1], inner)
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channels(l1);
        fn f<T: Float>(x: &[T], b: &[T], c: usize, inner: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for (i, plane) in out.chunks_mut(inner).enumerate() {
                let bias = b[i % c].to_f64();
                for v in plane {
                    *v = T::from_f64(v.to_f64() + bias);
                }
            }
            out
        }
        Ok((binary!("channel-bias", s1, l1, s2, l2, |x, b| f(x, b, c, inner)), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gb = grad.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(grad), Some(gb)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channels(l);
        fn f<T: Float>(x: &[T], c: usize, inner: usize) -> Vec<T> {
            let mut acc = vec![0.0f64; c];
            for (i, plane) in x.chunks(inner).enumerate() {
                acc[i % c] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            acc.into_iter().map(T::from_f64).collect()
        }
        Ok((unary!("channel-sum", s, l, |x| f(x, c, inner)), Shape::from(c)))
    }
}

/// `x[b, c, ...] + bias[c]` for `x` of rank >= 2.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

/// Nearest-neighbour upsampling by `k` and non-overlapping `k x k` mean
/// pooling; each is the other's adjoint up to a factor of `k^2`.
#[derive(Clone, Copy)]
enum Resample {
    Up(usize),
    Pool(usize),
}

impl Resample {
    fn run<T: Float>(self, x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        match self {
            Resample::Up(k) => {
                let (ho, wo) = (h * k, w * k);
                let mut out = vec![T::default(); planes * ho * wo];
                for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
                    for y in 0..ho {
                        let row = &src[(y / k) * w..(y / k + 1) * w];
                        for (x, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                            *d = row[x / k];
                        }
                    }
                }
                out
            }
            Resample::Pool(k) => {
                let (ho, wo) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f64;
                let mut out = vec![T::default(); planes * ho * wo];
                for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
                    let mut acc = vec![0.0f64; ho * wo];
                    for y in 0..h {
                        let a = &mut acc[(y / k) * wo..(y / k + 1) * wo];
                        for (x, v) in src[y * w..(y + 1) * w].iter().enumerate() {
                            a[x / k] += v.to_f64();
                        }
                    }
                    for (d, a) in dst.iter_mut().zip(acc) {
                        *d = T::from_f64(a * scale);
                    }
                }
                out
            }
        }
    }

    fn out_hw(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Resample::Up(k) => (h * k, w * k),
            Resample::Pool(k) => (h / k, w / k),
        }
    }
}

impl CustomOp1 for Resample {
    fn name(&self) -> &'static str {
        match self {
            Resample::Up(_) => "upsample",
            Resample::Pool(_) => "avg-pool",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (ho, wo) = self.out_hw(h, w);
        let out = unary!(self.name(), s, l, |x| self.run(x, b * c, h, w));
        Ok((out, Shape::from((b, c, ho, wo))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(match *self {
            Resample::Up(k) => (g.apply_op1_no_bwd(&Resample::Pool(k))? * (k * k) as f64)?,
            Resample::Pool(k) => (g.apply_op1_no_bwd(&Resample::Up(k))? / (k * k) as f64)?,
        }))
    }
}

/// `[B, C, H, W] -> [B, C, kH, kW]`, nearest neighbour.
pub fn upsample_nearest(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Resample::Up(k))?)
}

/// `[B, C, H, W] -> [B, C, H/k, W/k]`; sides must be multiples of `k`.
pub fn mean_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Resample::Pool(k))?)
}
