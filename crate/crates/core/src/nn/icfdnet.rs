use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::fused::silu;
use super::icblock::{IcBlock, ICBLOCK_DOWNSAMPLE};
use super::layers::{avg_pool, global_avg_pool, sigmoid, upsample, Conv2d, Linear};
use super::params::{ParamBuilder, ParamStore};
use crate::error::{config_err, shape_err, Result};

/// Architecture hyperparameters shared by both decoupler instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcfdArch {
    /// ICBlocks per side of the U.
    pub depth: usize,
    pub base_width: usize,
    pub heads: usize,
    pub dilations: Vec<usize>,
    pub pool_levels: Vec<usize>,
    pub feature_channels: usize,
}

impl Default for IcfdArch {
    fn default() -> Self {
        Self {
            depth: 2,
            base_width: 16,
            heads: 2,
            dilations: vec![2, 3],
            pool_levels: vec![1, 2, 4],
            feature_channels: 4,
        }
    }
}

impl IcfdArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err!("decoupler depth must be >= 1"));
        }
        if self.base_width == 0 || self.feature_channels == 0 {
            return Err(config_err!("decoupler widths must be positive"));
        }
        if self.heads == 0 || self.base_width % self.heads != 0 {
            return Err(config_err!(
                "{} attention heads do not divide base width {}",
                self.heads,
                self.base_width
            ));
        }
        if self.dilations.iter().any(|&r| r == 0) {
            return Err(config_err!("dilation rates must be >= 1"));
        }
        if self.pool_levels.is_empty() || self.pool_levels.iter().any(|&l| l == 0) {
            return Err(config_err!("pool levels must be a non-empty list of positive factors"));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Smallest side length the network accepts; inputs must be multiples of it.
    pub fn side_multiple(&self) -> usize {
        let unet = (ICBLOCK_DOWNSAMPLE << (self.depth - 1)).max(1 << self.depth);
        self.pool_levels.iter().fold(unet, |acc, &l| lcm(acc, l))
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.side_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "input {h}x{w} incompatible with depth {}: sides must be multiples of {m}",
                self.depth
            ));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Class scores (`K` logits) from the specific-feature decoupler.
    Specific { num_classes: usize },
    /// Image reconstruction in `[0, 1]` from the common-feature decoupler.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcfdConfig {
    pub arch: IcfdArch,
    pub head: HeadKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum HeadOutput {
    Scores(Tensor),
    Reconstruction(Tensor),
}

#[derive(Debug, Clone)]
pub struct DecoupleOutput {
    /// `[B, C_f, H, W]`
    pub features: Tensor,
    pub head: HeadOutput,
}

impl DecoupleOutput {
    pub fn scores(&self) -> Option<&Tensor> {
        match &self.head {
            HeadOutput::Scores(s) => Some(s),
            HeadOutput::Reconstruction(_) => None,
        }
    }

    pub fn reconstruction(&self) -> Option<&Tensor> {
        match &self.head {
            HeadOutput::Reconstruction(r) => Some(r),
            HeadOutput::Scores(_) => None,
        }
    }
}

/// Fuses average-pooled pyramids of the raw input back into deep features.
#[derive(Debug, Clone)]
pub struct PoolFuse {
    levels: Vec<usize>,
    project: Conv2d,
    deep_channels: usize,
}

impl PoolFuse {
    pub fn new(pb: &ParamBuilder, levels: &[usize], raw_channels: usize, deep_channels: usize) -> Result<Self> {
        let c_in = deep_channels + levels.len() * raw_channels;
        Ok(Self {
            levels: levels.to_vec(),
            project: Conv2d::new(&pb.pp("project"), c_in, deep_channels, 1, 1, 1)?,
            deep_channels,
        })
    }

    /// One `[B, C_raw, H, W]` map per level: pooled by the level factor, then
    /// upsampled back to full resolution.
    pub fn pyramid(&self, raw: &Tensor) -> Result<Vec<Tensor>> {
        self.levels
            .iter()
            .map(|&l| upsample(&avg_pool(raw, l)?, l))
            .collect()
    }

    pub fn forward(&self, raw: &Tensor, deep: &Tensor) -> Result<Tensor> {
        let (rb, _, rh, rw) = raw.dims4()?;
        let (db, dc, dh, dw) = deep.dims4()?;
        if (rb, rh, rw) != (db, dh, dw) || dc != self.deep_channels {
            return Err(shape_err!(
                "pool fusion: raw {:?} vs deep {:?}",
                raw.dims(),
                deep.dims()
            ));
        }
        let mut parts = vec![deep.clone()];
        parts.extend(self.pyramid(raw)?);
        self.project.forward(&Tensor::cat(&parts, 1)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    project: Option<Conv2d>,
    block: IcBlock,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    fuse: Conv2d,
    block: IcBlock,
}

#[derive(Debug, Clone)]
enum Head {
    Specific(Linear),
    Common(Conv2d),
}

/// U-shaped feature decoupler built from ICBlocks.
#[derive(Debug, Clone)]
pub struct IcfdNet {
    config: IcfdConfig,
    stem: Conv2d,
    encoder: Vec<EncoderLevel>,
    bridge: Conv2d,
    decoder: Vec<DecoderLevel>,
    pool_fuse: PoolFuse,
    to_features: Conv2d,
    head: Head,
    params: ParamStore,
}

impl IcfdNet {
    /// Builds the network with parameters drawn deterministically from `config.seed`.
    pub fn new(config: IcfdConfig, dtype: DType, device: &Device) -> Result<Self> {
        let arch = &config.arch;
        arch.validate()?;
        let pb = ParamBuilder::new(config.seed, dtype, device);
        let stem = Conv2d::new(&pb.pp("stem"), 1, arch.width(0), 3, 1, 1)?;
        let mut encoder = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            let p = pb.pp(format!("enc{l}"));
            let project = match l {
                0 => None,
                _ => Some(Conv2d::new(&p.pp("project"), arch.width(l - 1), arch.width(l), 1, 1, 1)?),
            };
            encoder.push(EncoderLevel {
                project,
                block: IcBlock::new(&p.pp("block"), arch.width(l), arch.heads, &arch.dilations)?,
            });
        }
        let deepest = arch.width(arch.depth - 1);
        let bridge = Conv2d::new(&pb.pp("bridge"), deepest, deepest, 3, 1, 2)?;
        let mut decoder = Vec::with_capacity(arch.depth);
        for l in (0..arch.depth).rev() {
            let p = pb.pp(format!("dec{l}"));
            let below = if l + 1 == arch.depth { deepest } else { arch.width(l + 1) };
            decoder.push(DecoderLevel {
                fuse: Conv2d::new(&p.pp("fuse"), below + arch.width(l), arch.width(l), 1, 1, 1)?,
                block: IcBlock::new(&p.pp("block"), arch.width(l), arch.heads, &arch.dilations)?,
            });
        }
        let pool_fuse = PoolFuse::new(&pb.pp("pool_fuse"), &arch.pool_levels, 1, arch.width(0))?;
        let to_features = Conv2d::new(&pb.pp("features"), arch.width(0), arch.feature_channels, 1, 1, 1)?;
        let head = match config.head {
            HeadKind::Specific { num_classes } => {
                if num_classes < 2 {
                    return Err(config_err!("specific head needs K >= 2, got {num_classes}"));
                }
                Head::Specific(Linear::new(&pb.pp("head"), arch.feature_channels, num_classes)?)
            }
            HeadKind::Common => Head::Common(Conv2d::new(&pb.pp("head"), arch.feature_channels, 1, 1, 1, 1)?),
        };
        Ok(Self {
            config,
            stem,
            encoder,
            bridge,
            decoder,
            pool_fuse,
            to_features,
            head,
            params: pb.finish(),
        })
    }

    pub fn config(&self) -> &IcfdConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn first_block(&self) -> &IcBlock {
        &self.encoder[0].block
    }

    /// Accepts `[B, 1, H, W]` (or a single `[1, H, W]` image).
    pub fn forward(&self, x: &Tensor) -> Result<DecoupleOutput> {
        let x = match x.rank() {
            3 => x.unsqueeze(0)?,
            4 => x.clone(),
            _ => return Err(shape_err!("decoupler input must be [B,1,H,W], got {:?}", x.dims())),
        };
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(shape_err!("decoupler expects 1 input channel, got {c}"));
        }
        self.config.arch.check_input(h, w)?;

        let mut cur = silu(&self.stem.forward(&x)?)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            if let Some(p) = &level.project {
                cur = silu(&p.forward(&cur)?)?;
            }
            cur = level.block.forward(&cur)?;
            skips.push(cur.clone());
            cur = avg_pool(&cur, 2)?;
        }
        cur = silu(&self.bridge.forward(&cur)?)?;
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = Tensor::cat(&[&upsample(&cur, 2)?, &skip], 1)?;
            cur = silu(&level.fuse.forward(&up)?)?;
            cur = level.block.forward(&cur)?;
        }
        let fused = silu(&self.pool_fuse.forward(&x, &cur)?)?;
        let features = self.to_features.forward(&fused)?;
        let head = match &self.head {
            Head::Specific(linear) => HeadOutput::Scores(linear.forward(&global_avg_pool(&features)?)?),
            Head::Common(conv) => HeadOutput::Reconstruction(sigmoid(&conv.forward(&features)?)?),
        };
        Ok(DecoupleOutput { features, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(head: HeadKind, seed: u64) -> IcfdNet {
        IcfdNet::new(
            IcfdConfig {
                arch: IcfdArch::default(),
                head,
                seed,
            },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn specific_head_shapes() {
        let n = net(HeadKind::Specific { num_classes: 4 }, 0);
        let x = Tensor::rand(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let out = n.forward(&x).unwrap();
        assert_eq!(out.features.dims(), &[2, 4, 64, 64]);
        assert_eq!(out.scores().unwrap().dims(), &[2, 4]);
        assert!(out.reconstruction().is_none());
    }

    #[test]
    fn common_head_in_unit_range_and_deterministic() {
        let n = net(HeadKind::Common, 3);
        let x = (Tensor::randn(0f32, 5.0, (1, 1, 32, 32), &Device::Cpu).unwrap()).clamp(0f32, 1f32).unwrap();
        let a = n.forward(&x).unwrap();
        let b = n.forward(&x).unwrap();
        let ra = a.reconstruction().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let rb = b.reconstruction().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ra, rb);
        assert!(ra.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn seeds_control_params() {
        let a = net(HeadKind::Common, 5);
        let b = net(HeadKind::Common, 5);
        let c = net(HeadKind::Common, 6);
        let flat = |n: &IcfdNet| -> Vec<f32> {
            n.params()
                .vars()
                .flat_map(|v| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn default_param_budget() {
        let n = net(HeadKind::Specific { num_classes: 4 }, 0);
        assert!(n.param_count() < 5_000_000, "{}", n.param_count());
    }

    #[test]
    fn incompatible_sizes_rejected() {
        let n = net(HeadKind::Common, 0);
        let x = Tensor::zeros((1, 1, 20, 20), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(n.forward(&x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn constant_input_pyramid_is_constant() {
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let pf = PoolFuse::new(&pb, &[1, 2, 4], 1, 8).unwrap();
        let raw = (Tensor::ones((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap() * 0.37).unwrap();
        for level in pf.pyramid(&raw).unwrap() {
            for v in level.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                assert!((v - 0.37).abs() < 1e-15);
            }
        }
        let deep = Tensor::zeros((1, 8, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let out = pf.forward(&raw, &deep).unwrap();
        assert_eq!(out.dims(), &[1, 8, 16, 16]);
    }

    #[test]
    fn independent_instances() {
        let a = net(HeadKind::Specific { num_classes: 4 }, 1);
        let b = net(HeadKind::Common, 2);
        let x = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let before = b.forward(&x).unwrap().features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (name, v) in a.params().iter() {
            a.params().assign(name, &v.zeros_like().unwrap()).unwrap();
        }
        let after = b.forward(&x).unwrap().features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(before, after);
    }
}
