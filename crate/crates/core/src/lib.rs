//! Feature-decoupling classification pipeline with per-class accuracy-adaptive
//! adversarial training.
//!
//! Two ICFDNet decouplers split a grayscale image into specific (class
//! discriminative) and common (reconstruction) feature maps. Those maps are
//! stacked with the luma channel and fed to a classifier that is trained with
//! a TRADES-style loss whose perturbation budget and robust weight are set per
//! class from that class's latest adversarial training accuracy.

pub mod ablation;
pub mod adversary;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
