//! Network building blocks and the ICFDNet feature decoupler.

mod fused;
mod icblock;
mod icfdnet;
mod im2col;
pub mod layers;
mod params;

pub use fused::silu;
pub use icblock::{IcBlock, ICBLOCK_DOWNSAMPLE};
pub use icfdnet::{DecoupleOutput, HeadKind, HeadOutput, IcfdArch, IcfdConfig, IcfdNet, PoolFuse};
pub use params::{ParamBuilder, ParamStore};
