//! Toy-scale pluggable classifier backbones.
//!
//! Every backbone maps `[B, C_in, H, W]` to `[B, K]` logits. The convolutional
//! ones open with a 4x4 patchify stem so the repeated forward/backward passes
//! of the attack stay cheap on a CPU.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::layers::{avg_pool, global_avg_pool, sigmoid, Conv2d, GroupNorm, Linear};
use crate::nn::{ParamBuilder, ParamStore};

pub const BACKBONES: [&str; 5] = [
    "small-resnet",
    "small-senet",
    "small-cbam",
    "small-squeezenet",
    "linear-probe",
];

const STEM_PATCH: usize = 4;
const NORM_GROUPS: usize = 4;

fn norm(pb: &ParamBuilder, c: usize) -> Result<GroupNorm> {
    let groups = if c % NORM_GROUPS == 0 { NORM_GROUPS } else { 1 };
    GroupNorm::new(pb, c, groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: String,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: "small-resnet".to_string(),
            width: 16,
        }
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

impl SqueezeExcite {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        let hidden = (c / 4).max(1);
        Ok(Self {
            reduce: Linear::new(&pb.pp("reduce"), c, hidden)?,
            expand: Linear::new(&pb.pp("expand"), hidden, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let s = global_avg_pool(x)?;
        let g = sigmoid(&self.expand.forward(&self.reduce.forward(&s)?.relu()?)?)?;
        Ok(x.broadcast_mul(&g.reshape((b, c, 1, 1))?)?)
    }
}

/// Channel then spatial attention gate.
#[derive(Debug, Clone)]
struct Cbam {
    reduce: Linear,
    expand: Linear,
    spatial: Conv2d,
}

impl Cbam {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        let hidden = (c / 4).max(1);
        Ok(Self {
            reduce: Linear::new(&pb.pp("reduce"), c, hidden)?,
            expand: Linear::new(&pb.pp("expand"), hidden, c)?,
            spatial: Conv2d::new(&pb.pp("spatial"), 2, 1, 7, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let mlp = |v: &Tensor| -> Result<Tensor> { self.expand.forward(&self.reduce.forward(v)?.relu()?) };
        let avg = global_avg_pool(x)?;
        let max = x.reshape((b, c, h * w))?.max(D::Minus1)?;
        let ch = sigmoid(&(mlp(&avg)? + mlp(&max)?)?)?;
        let x = x.broadcast_mul(&ch.reshape((b, c, 1, 1))?)?;
        let pooled = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
        let sp = sigmoid(&self.spatial.forward(&pooled)?)?;
        Ok(x.broadcast_mul(&sp)?)
    }
}

#[derive(Debug, Clone)]
enum Gate {
    None,
    Se(SqueezeExcite),
    Cbam(Cbam),
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    gate: Gate,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, c: usize, gate: &str) -> Result<Self> {
        let gate = match gate {
            "se" => Gate::Se(SqueezeExcite::new(&pb.pp("se"), c)?),
            "cbam" => Gate::Cbam(Cbam::new(&pb.pp("cbam"), c)?),
            _ => Gate::None,
        };
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), c, c, 3, 1, 1)?,
            norm1: norm(&pb.pp("norm1"), c)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c, c, 3, 1, 1)?,
            norm2: norm(&pb.pp("norm2"), c)?,
            gate,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let y = match &self.gate {
            Gate::None => y,
            Gate::Se(se) => se.forward(&y)?,
            Gate::Cbam(cb) => cb.forward(&y)?,
        };
        Ok((x + y)?.relu()?)
    }
}

/// Patchify stem, residual stage, strided transition, residual stage, linear head.
#[derive(Debug, Clone)]
struct ResNetLike {
    stem: Conv2d,
    stem_norm: GroupNorm,
    stage1: ResBlock,
    transition: Conv2d,
    transition_norm: GroupNorm,
    stage2: ResBlock,
    head: Linear,
}

impl ResNetLike {
    fn new(pb: &ParamBuilder, c_in: usize, k: usize, width: usize, gate: &str) -> Result<Self> {
        Ok(Self {
            stem: Conv2d::patchify(&pb.pp("stem"), c_in, width, STEM_PATCH)?,
            stem_norm: norm(&pb.pp("stem_norm"), width)?,
            stage1: ResBlock::new(&pb.pp("stage1"), width, gate)?,
            transition: Conv2d::new(&pb.pp("transition"), width, 2 * width, 3, 2, 1)?,
            transition_norm: norm(&pb.pp("transition_norm"), 2 * width)?,
            stage2: ResBlock::new(&pb.pp("stage2"), 2 * width, gate)?,
            head: Linear::new(&pb.pp("head"), 2 * width, k)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let x = self.stage1.forward(&x)?;
        let x = self.transition_norm.forward(&self.transition.forward(&x)?)?.relu()?;
        let x = self.stage2.forward(&x)?;
        self.head.forward(&global_avg_pool(&x)?)
    }
}

#[derive(Debug, Clone)]
struct Fire {
    squeeze: Conv2d,
    expand1: Conv2d,
    expand3: Conv2d,
}

impl Fire {
    fn new(pb: &ParamBuilder, c_in: usize, squeeze: usize, expand: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Conv2d::new(&pb.pp("squeeze"), c_in, squeeze, 1, 1, 1)?,
            expand1: Conv2d::new(&pb.pp("expand1"), squeeze, expand, 1, 1, 1)?,
            expand3: Conv2d::new(&pb.pp("expand3"), squeeze, expand, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.squeeze.forward(x)?.relu()?;
        Ok(Tensor::cat(
            &[self.expand1.forward(&s)?.relu()?, self.expand3.forward(&s)?.relu()?],
            1,
        )?)
    }
}

#[derive(Debug, Clone)]
struct SqueezeNetLike {
    stem: Conv2d,
    stem_norm: GroupNorm,
    fire1: Fire,
    fire2: Fire,
    classifier: Conv2d,
}

impl SqueezeNetLike {
    fn new(pb: &ParamBuilder, c_in: usize, k: usize, width: usize) -> Result<Self> {
        let squeeze = (width / 2).max(1);
        Ok(Self {
            stem: Conv2d::patchify(&pb.pp("stem"), c_in, width, STEM_PATCH)?,
            stem_norm: norm(&pb.pp("stem_norm"), width)?,
            fire1: Fire::new(&pb.pp("fire1"), width, squeeze, width)?,
            fire2: Fire::new(&pb.pp("fire2"), 2 * width, squeeze, width)?,
            classifier: Conv2d::new(&pb.pp("classifier"), 2 * width, k, 1, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let x = self.fire1.forward(&x)?;
        let x = avg_pool(&x, 2)?;
        let x = self.fire2.forward(&x)?;
        global_avg_pool(&self.classifier.forward(&x)?)
    }
}

#[derive(Debug, Clone)]
struct LinearProbe {
    linear: Linear,
}

impl LinearProbe {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(&x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    ResNet(ResNetLike),
    SqueezeNet(SqueezeNetLike),
    Linear(LinearProbe),
}

/// A classifier `f` over the concatenated decoupler output.
#[derive(Debug, Clone)]
pub struct Classifier {
    name: String,
    in_channels: usize,
    image_size: usize,
    num_classes: usize,
    backbone: Backbone,
    params: ParamStore,
}

/// Builds a backbone by name for `in_channels x image_size x image_size` inputs.
pub fn build_classifier(
    config: &ClassifierConfig,
    in_channels: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Classifier> {
    if config.width == 0 {
        return Err(config_err!("classifier width must be positive"));
    }
    if num_classes < 2 {
        return Err(config_err!("classifier needs K >= 2, got {num_classes}"));
    }
    let pb = ParamBuilder::new(seed, dtype, device);
    let name = config.backbone.as_str();
    let w = config.width;
    let backbone = match name {
        "small-resnet" => Backbone::ResNet(ResNetLike::new(&pb, in_channels, num_classes, w, "")?),
        "small-senet" => Backbone::ResNet(ResNetLike::new(&pb, in_channels, num_classes, w, "se")?),
        "small-cbam" => Backbone::ResNet(ResNetLike::new(&pb, in_channels, num_classes, w, "cbam")?),
        "small-squeezenet" => Backbone::SqueezeNet(SqueezeNetLike::new(&pb, in_channels, num_classes, w)?),
        "linear-probe" => Backbone::Linear(LinearProbe {
            linear: Linear::new(&pb.pp("linear"), in_channels * image_size * image_size, num_classes)?,
        }),
        other => {
            return Err(config_err!(
                "unknown backbone '{other}'; valid names: {}",
                BACKBONES.join(", ")
            ))
        }
    };
    if !matches!(backbone, Backbone::Linear(_)) && image_size % (2 * STEM_PATCH) != 0 {
        return Err(config_err!(
            "{name} needs image sides divisible by {}, got {image_size}",
            2 * STEM_PATCH
        ));
    }
    Ok(Classifier {
        name: name.to_string(),
        in_channels,
        image_size,
        num_classes,
        backbone,
        params: pb.finish(),
    })
}

impl Classifier {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels || h != self.image_size || w != self.image_size {
            return Err(shape_err!(
                "{} expects [B,{},{},{}], got {:?}",
                self.name,
                self.in_channels,
                self.image_size,
                self.image_size,
                x.dims()
            ));
        }
        match &self.backbone {
            Backbone::ResNet(n) => n.forward(x),
            Backbone::SqueezeNet(n) => n.forward(x),
            Backbone::Linear(n) => n.forward(x),
        }
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        argmax_rows(&self.forward(x)?)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}
