use candle_core::{Tensor, D};

pub use super::fused::softmax_last;
use super::fused::{add_channel_bias, mean_pool, upsample_nearest};
use super::params::ParamBuilder;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
    dilation: usize,
}

impl Conv2d {
    /// Square `k x k` convolution. Padding keeps the spatial size for stride 1.
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let weight = pb.uniform("weight", (c_out, c_in, k, k), (6.0 / fan_in).sqrt())?;
        let bias = Some(pb.zeros("bias", c_out)?);
        Ok(Self {
            weight,
            bias,
            padding: dilation * (k - 1) / 2,
            stride,
            dilation,
        })
    }

    /// Non-overlapping `k x k` patches, stride `k`.
    pub fn patchify(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let mut c = Self::new(pb, c_in, c_out, k, k, 1)?;
        c.padding = 0;
        Ok(c)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::im2col::conv2d(x, &self.weight, self.padding, self.stride, self.dilation)?;
        Ok(match &self.bias {
            Some(b) => add_channel_bias(&y, b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (1.0 / d_in as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", (d_out, d_in), bound)?,
            bias: pb.zeros("bias", d_out)?,
        })
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_out = self.weight.dim(0)?;
        match x.rank() {
            2 => Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?),
            3 => {
                let (b, n, d) = x.dims3()?;
                let flat = x.reshape((b * n, d))?.matmul(&self.weight.t()?)?;
                Ok(flat.broadcast_add(&self.bias)?.reshape((b, n, d_out))?)
            }
            r => Err(shape_err!("linear layer got rank {r} input")),
        }
    }
}

/// Non-overlapping `k x k` average pooling of a `[B, C, H, W]` tensor.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(shape_err!("cannot pool {h}x{w} by {k}"));
    }
    mean_pool(x, k)
}

/// Nearest-neighbour upsampling of a `[B, C, H, W]` tensor by an integer factor.
pub fn upsample(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    x.dims4()?;
    upsample_nearest(x, k)
}

/// Per-sample normalization over channel groups, with a learned per-channel affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(shape_err!("{groups} groups do not divide {channels} channels"));
        }
        Ok(Self {
            groups,
            gamma: pb.ones("gamma", channels)?,
            beta: pb.zeros("beta", channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let centred = g.broadcast_sub(&g.mean_keepdim(D::Minus1)?)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred
            .broadcast_div(&(var + Self::EPS)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Logistic function via `tanh`, which stays finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Multi-head self-attention over the spatial positions of a feature map.
#[derive(Debug, Clone)]
pub struct SpatialSelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    channels: usize,
}

impl SpatialSelfAttention {
    pub fn new(pb: &ParamBuilder, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(shape_err!("{heads} heads do not divide embedding width {channels}"));
        }
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), channels, 3 * channels)?,
            out: Linear::new(&pb.pp("out"), channels, channels)?,
            heads,
            channels,
        })
    }

    /// Returns `(q, k, v)` as `[B, heads, N, head_dim]` plus the token count.
    fn project(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("attention expects {} channels, got {c}", self.channels));
        }
        let n = h * w;
        let d = c / self.heads;
        let tokens = x.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let qkv = self.qkv.forward(&tokens)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((b, n, self.heads, d))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        Ok((split(0)?, split(1)?, split(2)?, n))
    }

    /// Attention probabilities `[B, heads, N, N]`; each row sums to one.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _, _) = self.project(x)?;
        let scale = 1.0 / ((self.channels / self.heads) as f64).sqrt();
        softmax_last(&(q.matmul(&k.t()?)? * scale)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (q, k, v, n) = self.project(x)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let attn = softmax_last(&(q.matmul(&k.t()?)? * scale)?)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        let y = self.out.forward(&mixed)?;
        Ok(y.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let p = avg_pool(&x, 2).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample(&p, 2).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        assert_eq!(u.flatten_all().unwrap().to_vec1::<f32>().unwrap()[..4], [2.5, 2.5, 4.5, 4.5]);
        assert!(avg_pool(&x, 3).is_err());
    }

    #[test]
    fn uniform_attention_on_identical_tokens() {
        let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu);
        let attn = SpatialSelfAttention::new(&pb, 4, 1).unwrap();
        let x = Tensor::ones((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let w = attn.attention_weights(&x).unwrap();
        assert_eq!(w.dims(), &[2, 1, 9, 9]);
        for v in w.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu);
        assert!(SpatialSelfAttention::new(&pb, 6, 4).is_err());
    }

    #[test]
    fn sigmoid_is_finite_at_extremes() {
        let x = Tensor::new(&[-500f32, 0.0, 500.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }
}
