//! Run configuration, read from a TOML file.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/demo"
//! use_decouplers = true
//!
//! [data]
//! kind = "synthetic"            # or "folder"
//! [data.synthetic]
//! counts = [150, 150, 150, 150]
//! image_size = 64
//! seed = 7
//! classes = [
//!   { grain = 2.0, noise = 0.25, brightness = 0.0 },
//!   { grain = 3.0, noise = 0.25, brightness = 0.0 },
//!   { grain = 4.0, noise = 0.25, brightness = 0.0 },
//!   { grain = 5.0, noise = 0.25, brightness = 0.0 },
//! ]
//!
//! [ic1]                         # same keys for [ic2]
//! depth = 2
//! base_width = 16
//! heads = 2
//! dilations = [2, 3]
//! pool_levels = [1, 2, 4]
//! feature_channels = 4
//!
//! [classifier]
//! backbone = "small-resnet"
//! width = 16
//!
//! [loss]
//! lambda_c = 1.0
//! lambda_s = 1.0
//! lambda_at = 1.0
//! xi = 1e-3
//!
//! [schedule]
//! epsilon = 0.031372549
//! beta = 6.0
//! sigma = 0.5
//! mu = 0.5
//! mode = "adaptive"             # "fixed" | "off"
//!
//! [attack]
//! steps = 10
//! step_fraction = 0.25
//! random_init = true
//!
//! [optim]
//! learning_rate = 0.01
//! momentum = 0.9
//! epochs = 30
//! batch_size = 16
//! ```
//!
//! Every section and key is optional; omitted values take the defaults shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AttackConfig, ScheduleParams};
use crate::classifier::ClassifierConfig;
use crate::data::{generate_synthetic, load_folder_split, DatasetSpec, FolderLayout, Split};
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::nn::IcfdArch;
use crate::optim::OptimConfig;
use crate::rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub path: PathBuf,
    #[serde(default)]
    pub resize: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: DatasetSpec,
    pub folder: Option<FolderSource>,
}

impl DataConfig {
    pub fn load(&self, split_seed: u64) -> Result<Split> {
        match self.kind {
            DataKind::Synthetic => generate_synthetic(&self.synthetic),
            DataKind::Folder => {
                let f = self
                    .folder
                    .as_ref()
                    .ok_or_else(|| config_err!("data.kind = \"folder\" needs a [data.folder] section"))?;
                load_folder_split(&f.path, &FolderLayout { resize: f.resize }, split_seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Feed the classifier `cat(Feat1, Feat2, Y)` when set, the luma image alone otherwise.
    pub use_decouplers: bool,
    pub data: DataConfig,
    pub ic1: IcfdArch,
    pub ic2: IcfdArch,
    pub classifier: ClassifierConfig,
    pub loss: LossWeights,
    pub schedule: ScheduleParams,
    pub attack: AttackConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            use_decouplers: true,
            data: DataConfig::default(),
            ic1: IcfdArch::default(),
            ic2: IcfdArch::default(),
            classifier: ClassifierConfig::default(),
            loss: LossWeights::default(),
            schedule: ScheduleParams::default(),
            attack: AttackConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Seeds for every independent random consumer of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedSeeds {
    pub ic1: u64,
    pub ic2: u64,
    pub classifier: u64,
    pub shuffle: u64,
    pub attack: u64,
    pub split: u64,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| config_err!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize config: {e}"))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) | Error::Domain(m) => config_err!("[{section}] {m}"),
                other => other,
            })
        };
        wrap("ic1", self.ic1.validate())?;
        wrap("ic2", self.ic2.validate())?;
        wrap("loss", self.loss.validate())?;
        wrap("schedule", self.schedule.validate())?;
        wrap("attack", self.attack.validate())?;
        wrap("optim", self.optim.validate())?;
        if self.data.kind == DataKind::Synthetic {
            wrap("data.synthetic", self.data.synthetic.validate())?;
        }
        if self.classifier.width == 0 {
            return Err(config_err!("[classifier] width must be positive"));
        }
        if self.use_decouplers && self.ic1.feature_channels != self.ic2.feature_channels {
            // not required by the math, but the classifier input width is 2 C_f + 1
            return Err(config_err!("ic1 and ic2 must use the same feature_channels"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> DerivedSeeds {
        DerivedSeeds {
            ic1: rng::mix(self.seed, 11),
            ic2: rng::mix(self.seed, 12),
            classifier: rng::mix(self.seed, 13),
            shuffle: rng::mix(self.seed, 14),
            attack: rng::mix(self.seed, 15),
            split: rng::mix(self.seed, 16),
        }
    }

    /// Channel count of the classifier input.
    pub fn classifier_channels(&self) -> usize {
        if self.use_decouplers {
            self.ic1.feature_channels + self.ic2.feature_channels + 1
        } else {
            1
        }
    }

    pub fn load_data(&self) -> Result<Split> {
        self.data.load(self.seeds().split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.classifier_channels(), 9);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.output_dir = Some("out".into());
        c.schedule.mode = crate::adversary::ScheduleMode::Fixed;
        let s = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let c = RunConfig::from_toml_str("[optim]\nepochs = 3\n[classifier]\nbackbone = \"small-senet\"").unwrap();
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.optim.batch_size, 16);
        assert_eq!(c.classifier.backbone, "small-senet");
        assert!(RunConfig::from_toml_str("[optim]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml_str("[optim]\nepochs = 0").is_err());
    }

    #[test]
    fn folder_source_requires_section() {
        let c = RunConfig::from_toml_str("[data]\nkind = \"folder\"").unwrap();
        assert!(matches!(c.load_data(), Err(Error::Config(_))));
    }
}
