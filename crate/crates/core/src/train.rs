//! The joint training loop.
//!
//! Per minibatch: decouple with IC1 and IC2, stack `(Feat1, Feat2, Y)` into
//! the classifier input `x_c`, craft `x'` inside each sample's class budget,
//! then take one momentum-SGD step on `lambda_c l_c + lambda_s l_s +
//! lambda_at l_at` over all three networks. Per epoch: refresh the per-class
//! schedule from the adversarial accuracy accumulated over the epoch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{generate_adversarial, AccuracyTracker, AttackConfig, ClassState};
use crate::checkpoint::save_checkpoint;
use crate::classifier::{argmax_rows, build_classifier, Classifier};
use crate::config::RunConfig;
use crate::data::{concat_inputs, Dataset, Split};
use crate::error::{config_err, Error, Result};
use crate::losses::{calibrated_at_loss_anchored, common_loss, specific_loss, total_loss, LossBundle, LossWeights};
use crate::nn::{DecoupleOutput, HeadKind, IcfdConfig, IcfdNet, ParamStore};
use crate::optim::Sgd;
use crate::rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// IC1, IC2 and the classifier. The decouplers never share parameters.
#[derive(Debug, Clone)]
pub struct Models {
    pub ic1: IcfdNet,
    pub ic2: IcfdNet,
    pub classifier: Classifier,
    pub use_decouplers: bool,
    pub image_size: usize,
}

/// Intermediate tensors of one forward pass through the pipeline.
pub struct Decoupled {
    pub x_c: Tensor,
    pub specific: Option<DecoupleOutput>,
    pub common: Option<DecoupleOutput>,
}

impl Models {
    pub fn build(config: &RunConfig, num_classes: usize, image_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        let seeds = config.seeds();
        let ic1 = IcfdNet::new(
            IcfdConfig {
                arch: config.ic1.clone(),
                head: HeadKind::Specific { num_classes },
                seed: seeds.ic1,
            },
            dtype,
            device,
        )?;
        let ic2 = IcfdNet::new(
            IcfdConfig {
                arch: config.ic2.clone(),
                head: HeadKind::Common,
                seed: seeds.ic2,
            },
            dtype,
            device,
        )?;
        if config.use_decouplers {
            config.ic1.check_input(image_size, image_size)?;
            config.ic2.check_input(image_size, image_size)?;
        }
        let classifier = build_classifier(
            &config.classifier,
            config.classifier_channels(),
            num_classes,
            image_size,
            seeds.classifier,
            dtype,
            device,
        )?;
        Ok(Self {
            ic1,
            ic2,
            classifier,
            use_decouplers: config.use_decouplers,
            image_size,
        })
    }

    /// `(prefix, store)` pairs in checkpoint order.
    pub fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            ("ic1", self.ic1.params()),
            ("ic2", self.ic2.params()),
            ("clf", self.classifier.params()),
        ]
    }

    /// Parameters the optimizer updates.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars: Vec<Var> = self.classifier.params().vars().cloned().collect();
        if self.use_decouplers {
            vars.extend(self.ic1.params().vars().cloned());
            vars.extend(self.ic2.params().vars().cloned());
        }
        vars
    }

    pub fn snapshot(&self) -> Result<Vec<Vec<(String, Tensor)>>> {
        self.stores().iter().map(|(_, s)| s.snapshot()).collect()
    }

    pub fn restore(&self, snap: &[Vec<(String, Tensor)>]) -> Result<()> {
        for ((_, store), s) in self.stores().iter().zip(snap) {
            store.restore(s)?;
        }
        Ok(())
    }

    /// Runs the decouplers (when enabled) and builds the classifier input.
    pub fn decouple(&self, x: &Tensor) -> Result<Decoupled> {
        if !self.use_decouplers {
            return Ok(Decoupled {
                x_c: x.clone(),
                specific: None,
                common: None,
            });
        }
        let specific = self.ic1.forward(x)?;
        let common = self.ic2.forward(x)?;
        // inputs are already single-channel luma
        let x_c = concat_inputs(&specific.features, &common.features, x)?;
        Ok(Decoupled {
            x_c,
            specific: Some(specific),
            common: Some(common),
        })
    }

    /// Clean-input predictions (argmax of the classifier logits).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        argmax_rows(&self.classifier.forward(&self.decouple(x)?.x_c)?)
    }
}

/// Loss tensors of one minibatch, before the optimizer step.
pub struct StepLosses {
    pub total: Tensor,
    pub bundle: LossBundle,
    pub adv_predictions: Vec<usize>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Forward part of a training step: decoupling, attack and the three losses.
pub fn step_losses(
    models: &Models,
    x: &Tensor,
    labels: &[usize],
    state: &ClassState,
    weights: &LossWeights,
    attack: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    let dec = models.decouple(x)?;
    let clf = &models.classifier;
    let eps = state.sample_epsilons(labels)?;
    let clean = clf.forward(&dec.x_c)?;
    let adv = if eps.iter().all(|&e| e == 0.0) {
        clean.clone()
    } else {
        let x_adv = generate_adversarial(&dec.x_c, |t| clf.forward(t), &eps, attack, rng)?;
        // the perturbation is a constant offset; gradients still reach the decouplers via x_c
        let delta = (x_adv - dec.x_c.detach())?.detach();
        clf.forward(&(&dec.x_c + delta)?)?
    };
    let l_at = calibrated_at_loss_anchored(&clean, &clean.detach(), &adv, labels, state.betas())?;
    let (l_c, l_s) = match (&dec.specific, &dec.common) {
        (Some(s), Some(c)) => {
            let recon = c.reconstruction().expect("common head");
            let scores = s.scores().expect("specific head");
            (common_loss(x, recon, weights.xi)?, specific_loss(scores, labels)?)
        }
        _ => {
            let zero = l_at.zeros_like()?;
            (zero.clone(), zero)
        }
    };
    let bundle = total_loss(scalar(&l_c)?, scalar(&l_s)?, scalar(&l_at)?, weights)?;
    let total = ((l_c.affine(weights.lambda_c, 0.0)? + l_s.affine(weights.lambda_s, 0.0)?)?
        + l_at.affine(weights.lambda_at, 0.0)?)?;
    Ok(StepLosses {
        total,
        bundle,
        adv_predictions: argmax_rows(&adv)?,
    })
}

pub struct StepOutput {
    pub bundle: LossBundle,
    pub adv_predictions: Vec<usize>,
    /// Whether each sample's adversarial prediction matched its label.
    pub adv_correct: Vec<bool>,
}

/// One full minibatch update over the union of IC1, IC2 and classifier parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    models: &Models,
    x: &Tensor,
    labels: &[usize],
    state: &ClassState,
    weights: &LossWeights,
    attack: &AttackConfig,
    optimizer: &mut Sgd,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    let s = step_losses(models, x, labels, state, weights, attack, rng)?;
    let grads = s.total.backward()?;
    optimizer.step(&grads)?;
    let adv_correct = s.adv_predictions.iter().zip(labels).map(|(p, y)| p == y).collect();
    Ok(StepOutput {
        bundle: s.bundle,
        adv_predictions: s.adv_predictions,
        adv_correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_at: f64,
    pub total: f64,
    /// Per-class schedule after this epoch's update.
    pub acc: Vec<f64>,
    pub eps: Vec<f64>,
    pub beta: Vec<f64>,
    pub seconds: f64,
}

pub fn metrics_header(num_classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "l_c", "l_s", "l_at", "total"].iter().map(|s| s.to_string()).collect();
    for i in 0..num_classes {
        h.extend([format!("acc_{i}"), format!("eps_{i}"), format!("beta_{i}")]);
    }
    h.push("seconds".to_string());
    h
}

impl EpochRecord {
    pub fn to_row(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.l_c.to_string(),
            self.l_s.to_string(),
            self.l_at.to_string(),
            self.total.to_string(),
        ];
        for i in 0..self.acc.len() {
            r.extend([self.acc[i].to_string(), self.eps[i].to_string(), self.beta[i].to_string()]);
        }
        r.push(format!("{:.3}", self.seconds));
        r
    }

    pub fn from_row(row: &[String]) -> Result<Self> {
        let bad = |m: &str| config_err!("malformed metrics row: {m}");
        if row.len() < 6 || (row.len() - 6) % 3 != 0 {
            return Err(bad("wrong column count"));
        }
        let f = |s: &String| s.parse::<f64>().map_err(|_| bad(s));
        let k = (row.len() - 6) / 3;
        let mut rec = EpochRecord {
            epoch: row[0].parse().map_err(|_| bad(&row[0]))?,
            l_c: f(&row[1])?,
            l_s: f(&row[2])?,
            l_at: f(&row[3])?,
            total: f(&row[4])?,
            acc: Vec::with_capacity(k),
            eps: Vec::with_capacity(k),
            beta: Vec::with_capacity(k),
            seconds: f(&row[row.len() - 1])?,
        };
        for i in 0..k {
            rec.acc.push(f(&row[5 + 3 * i])?);
            rec.eps.push(f(&row[6 + 3 * i])?);
            rec.beta.push(f(&row[7 + 3 * i])?);
        }
        Ok(rec)
    }
}

pub fn write_metrics(path: &Path, records: &[EpochRecord], num_classes: usize) -> Result<()> {
    let item = |e: csv::Error| Error::Item {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(item)?;
    w.write_record(metrics_header(num_classes)).map_err(item)?;
    for r in records {
        w.write_record(r.to_row()).map_err(item)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Item {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    r.records()
        .map(|row| {
            let row = row.map_err(|e| Error::Item {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            EpochRecord::from_row(&row.iter().map(str::to_string).collect::<Vec<_>>())
        })
        .collect()
}

pub struct TrainOutcome {
    pub models: Models,
    pub records: Vec<EpochRecord>,
    pub state: ClassState,
    pub class_names: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

/// Loads the configured data and trains on it.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let split = config.load_data()?;
    train_on(config, &split)
}

fn check_square(ds: &Dataset) -> Result<usize> {
    if ds.height() != ds.width() {
        return Err(config_err!("images must be square, got {}x{}", ds.height(), ds.width()));
    }
    Ok(ds.height())
}

/// Trains on an already materialized split. Writes `metrics.csv`, the config
/// echo and the final checkpoint to `config.output_dir` when set.
pub fn train_on(config: &RunConfig, split: &Split) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = &split.train;
    let k = train_set.num_classes();
    let size = check_square(train_set)?;
    let device = Device::Cpu;
    let models = Models::build(config, k, size, DType::F32, &device)?;
    let mut state = ClassState::new(k, config.schedule)?;
    let mut optimizer = Sgd::new(models.trainable_vars(), config.optim.learning_rate, config.optim.momentum);
    let seeds = config.seeds();

    let out_dir = config.output_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join(CONFIG_ECHO_FILE);
        fs::write(&echo, config.to_toml_string()?).map_err(|e| Error::io(&echo, e))?;
    }
    let class_names = train_set.class_names().to_vec();

    let mut records = Vec::with_capacity(config.optim.epochs);
    let mut last_good = (models.snapshot()?, state.clone());
    for epoch in 1..=config.optim.epochs {
        let started = Instant::now();
        let mut tracker = AccuracyTracker::new(k);
        let mut sums = [0f64; 4];
        let mut seen = 0usize;
        let batches = train_set.batch_order(seeds.shuffle, epoch, config.optim.batch_size);
        for (b, idx) in batches.iter().enumerate() {
            let (x, labels) = train_set.batch(idx, DType::F32, &device)?;
            let mut attack_rng = rng::stream(seeds.attack, &[rng::TAG_ATTACK, epoch as u64, b as u64]);
            let step = train_step(
                &models,
                &x,
                &labels,
                &state,
                &config.loss,
                &config.attack,
                &mut optimizer,
                &mut attack_rng,
            );
            let step = match step {
                Ok(s) => s,
                Err(e) => {
                    models.restore(&last_good.0)?;
                    if let Some(dir) = &out_dir {
                        save_checkpoint(&dir.join(CHECKPOINT_FILE), &models, &last_good.1, config, &class_names)?;
                    }
                    return Err(e);
                }
            };
            tracker.record(&step.adv_predictions, &labels)?;
            let n = labels.len() as f64;
            let bl = step.bundle;
            for (s, v) in sums.iter_mut().zip([bl.l_c, bl.l_s, bl.l_at, bl.total]) {
                *s += v * n;
            }
            seen += labels.len();
        }
        state = tracker.apply(&state)?;
        let denom = seen.max(1) as f64;
        records.push(EpochRecord {
            epoch,
            l_c: sums[0] / denom,
            l_s: sums[1] / denom,
            l_at: sums[2] / denom,
            total: sums[3] / denom,
            acc: state.accuracies().to_vec(),
            eps: state.epsilons().to_vec(),
            beta: state.betas().to_vec(),
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &out_dir {
            write_metrics(&dir.join(METRICS_FILE), &records, k)?;
        }
        last_good = (models.snapshot()?, state.clone());
    }

    let checkpoint = match &out_dir {
        Some(dir) => {
            let p = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&p, &models, &state, config, &class_names)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        models,
        records,
        state,
        class_names,
        checkpoint,
    })
}
