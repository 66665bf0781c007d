//! Per-class accuracy, micro average and best-worst gap.
//!
//! Percentages are stored rounded to two decimals, and the gap is taken
//! between those rounded values so it matches a table built from them.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{domain_err, shape_err, Result};
use crate::train::Models;

pub const EVAL_BATCH: usize = 32;

/// Rounds to two decimals, half away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Percent, two decimals. `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    /// Micro accuracy: total correct over total samples, percent.
    pub average: f64,
    /// Unweighted mean of the present per-class values, percent.
    pub macro_average: f64,
    /// Max minus min over present classes, percent.
    pub gap: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, class_names: Vec<String>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(shape_err!("confusion matrix must be square and non-empty"));
        }
        if class_names.len() != k {
            return Err(shape_err!("{} class names for {k} classes", class_names.len()));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(domain_err!("cannot evaluate an empty dataset"));
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| round2(100.0 * row[i] as f64 / n as f64))
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = present.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            class_names,
            average: round2(100.0 * correct as f64 / total as f64),
            macro_average: round2(present.iter().sum::<f64>() / present.len() as f64),
            gap: round2(max - min),
            per_class,
            confusion,
        })
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize], class_names: Vec<String>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(shape_err!("{} predictions for {} labels", predictions.len(), labels.len()));
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= k || y >= k {
                return Err(domain_err!("class index out of range for {k} classes"));
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion, class_names)
    }

    /// Builds a report from per-class sample and hit counts.
    pub fn from_counts(counts: &[usize], correct: &[usize], class_names: Vec<String>) -> Result<Self> {
        let k = counts.len();
        if correct.len() != k {
            return Err(shape_err!("counts and correct differ in length"));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for i in 0..k {
            if correct[i] > counts[i] {
                return Err(domain_err!("class {i}: {} correct out of {}", correct[i], counts[i]));
            }
            confusion[i][i] = correct[i];
            // misses are booked to the next class; only row sums matter here
            confusion[i][(i + 1) % k] += counts[i] - correct[i];
        }
        Self::from_confusion(confusion, class_names)
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Clean-input predictions for every image, in dataset order.
pub fn predict_dataset(models: &Models, dataset: &Dataset) -> Result<Vec<usize>> {
    let device = models.classifier.params().device().clone();
    let mut preds = Vec::with_capacity(dataset.len());
    for idx in dataset.sequential_batches(EVAL_BATCH) {
        let (x, _) = dataset.batch(&idx, DType::F32, &device)?;
        preds.extend(models.predict(&x)?);
    }
    Ok(preds)
}

pub fn evaluate(models: &Models, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.num_classes() != models.classifier.num_classes() {
        return Err(shape_err!(
            "dataset has {} classes, model {}",
            dataset.num_classes(),
            models.classifier.num_classes()
        ));
    }
    let preds = predict_dataset(models, dataset)?;
    EvalReport::from_predictions(&preds, &dataset.labels(), dataset.class_names().to_vec())
}
