use candle_core::Tensor;

use super::fused::silu;
use super::layers::{upsample, Conv2d, SpatialSelfAttention};
use super::params::ParamBuilder;
use crate::error::{shape_err, Result};

/// Spatial reduction inside one block (two stride-2 convolutions).
pub const ICBLOCK_DOWNSAMPLE: usize = 4;

/// Iterative-compression block: a small U that compresses its input with two
/// strided convolutions, mixes the bottleneck globally with multi-head
/// self-attention, sharpens it with dilated convolutions, then recovers the
/// input resolution through skip fusions. Output shape equals input shape.
#[derive(Debug, Clone)]
pub struct IcBlock {
    down1: Conv2d,
    down2: Conv2d,
    attention: SpatialSelfAttention,
    dilated: Vec<Conv2d>,
    fuse_mid: Conv2d,
    fuse_top: Conv2d,
    channels: usize,
}

impl IcBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, heads: usize, dilations: &[usize]) -> Result<Self> {
        if let Some(&r) = dilations.iter().find(|&&r| r == 0) {
            return Err(shape_err!("dilation rate {r} must be >= 1"));
        }
        let dilated = dilations
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(&pb.pp(format!("dilated{i}")), channels, channels, 3, 1, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            down1: Conv2d::new(&pb.pp("down1"), channels, channels, 3, 2, 1)?,
            down2: Conv2d::new(&pb.pp("down2"), channels, channels, 3, 2, 1)?,
            attention: SpatialSelfAttention::new(&pb.pp("attn"), channels, heads)?,
            dilated,
            fuse_mid: Conv2d::new(&pb.pp("fuse_mid"), 2 * channels, channels, 3, 1, 1)?,
            fuse_top: Conv2d::new(&pb.pp("fuse_top"), 2 * channels, channels, 1, 1, 1)?,
            channels,
        })
    }

    pub fn attention(&self) -> &SpatialSelfAttention {
        &self.attention
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("ICBlock expects {} channels, got {c}", self.channels));
        }
        if h % ICBLOCK_DOWNSAMPLE != 0 || w % ICBLOCK_DOWNSAMPLE != 0 {
            return Err(shape_err!(
                "ICBlock input {h}x{w} not divisible by its downsample factor {ICBLOCK_DOWNSAMPLE}"
            ));
        }
        // compression
        let d1 = silu(&self.down1.forward(x)?)?;
        let d2 = silu(&self.down2.forward(&d1)?)?;
        // global mixing at the bottleneck
        let mut z = (&d2 + self.attention.forward(&d2)?)?;
        for conv in &self.dilated {
            z = (&z + silu(&conv.forward(&z)?)?)?;
        }
        // recovery
        let u1 = Tensor::cat(&[&upsample(&z, 2)?, &d1], 1)?;
        let u1 = silu(&self.fuse_mid.forward(&u1)?)?;
        let u0 = Tensor::cat(&[&upsample(&u1, 2)?, x], 1)?;
        Ok((x + self.fuse_top.forward(&u0)?)?)
    }
}
