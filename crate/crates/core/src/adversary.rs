//! Per-class adaptive perturbation schedule and the KL-maximizing attack.
//!
//! Each class `i` carries its latest adversarial training accuracy `Acc_i`.
//! From it the perturbation budget and robust-loss weight follow as
//!
//! ```text
//! eps_i  = (sigma + Acc_i) * eps
//! beta_i = (mu + Acc_i) * beta / (1 + (mu + Acc_i) * beta)
//! ```
//!
//! so weaker classes get smaller perturbations and a larger clean-loss weight
//! `1 - beta_i`.

use candle_core::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::losses::kl_per_sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    /// Base perturbation budget (L-infinity).
    pub epsilon: f64,
    /// Base robust regularization strength.
    pub beta: f64,
    /// Floor added to accuracy in the budget formula.
    pub sigma: f64,
    /// Floor added to accuracy in the weight formula.
    pub mu: f64,
    pub mode: ScheduleMode,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            beta: 6.0,
            sigma: 0.5,
            mu: 0.5,
            mode: ScheduleMode::Adaptive,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain_err!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// How per-class budgets and weights are derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// From each class's accuracy.
    #[default]
    Adaptive,
    /// `eps_i = eps` and `beta_i = beta / (1 + beta)` for every class.
    Fixed,
    /// No attack and no robust term: `eps_i = beta_i = 0`.
    Off,
}

fn check_acc(acc: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(domain_err!("accuracy {acc} outside [0, 1]"));
    }
    Ok(())
}

pub fn class_epsilon(acc: f64, sigma: f64, epsilon: f64) -> Result<f64> {
    check_acc(acc)?;
    if !(sigma >= 0.0 && epsilon >= 0.0) {
        return Err(domain_err!("sigma and epsilon must be >= 0 (got {sigma}, {epsilon})"));
    }
    Ok((sigma + acc) * epsilon)
}

pub fn class_beta(acc: f64, mu: f64, beta: f64) -> Result<f64> {
    check_acc(acc)?;
    if !(mu >= 0.0 && beta >= 0.0) {
        return Err(domain_err!("mu and beta must be >= 0 (got {mu}, {beta})"));
    }
    let s = (mu + acc) * beta;
    Ok(s / (1.0 + s))
}

/// Per-class accuracy, budget and robust weight. `eps` and `beta` are always
/// recomputed together from `acc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassState {
    acc: Vec<f64>,
    eps: Vec<f64>,
    beta: Vec<f64>,
    params: ScheduleParams,
}

impl ClassState {
    /// Starts every class at `Acc_i = 0`.
    pub fn new(num_classes: usize, params: ScheduleParams) -> Result<Self> {
        Self::from_accuracies(vec![0.0; num_classes], params)
    }

    pub fn from_accuracies(acc: Vec<f64>, params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let mut s = Self {
            eps: vec![0.0; acc.len()],
            beta: vec![0.0; acc.len()],
            acc,
            params,
        };
        s.refresh()?;
        Ok(s)
    }

    fn refresh(&mut self) -> Result<()> {
        let p = self.params;
        for (i, &a) in self.acc.iter().enumerate() {
            let (e, b) = match p.mode {
                ScheduleMode::Adaptive => (class_epsilon(a, p.sigma, p.epsilon)?, class_beta(a, p.mu, p.beta)?),
                ScheduleMode::Fixed => {
                    check_acc(a)?;
                    (p.epsilon, p.beta / (1.0 + p.beta))
                }
                ScheduleMode::Off => {
                    check_acc(a)?;
                    (0.0, 0.0)
                }
            };
            self.eps[i] = e;
            self.beta[i] = b;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.acc.len()
    }

    pub fn accuracies(&self) -> &[f64] {
        &self.acc
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.eps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Budget for each sample, looked up by its true label.
    pub fn sample_epsilons(&self, labels: &[usize]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&y| {
                self.eps
                    .get(y)
                    .copied()
                    .ok_or_else(|| domain_err!("label {y} out of range for {} classes", self.acc.len()))
            })
            .collect()
    }

    /// Rebuilds a state from stored arrays, checking they agree with the schedule.
    pub fn from_parts(acc: Vec<f64>, eps: Vec<f64>, beta: Vec<f64>, params: ScheduleParams) -> Result<Self> {
        let s = Self::from_accuracies(acc, params)?;
        if s.eps != eps || s.beta != beta {
            return Err(Error::Checkpoint(
                "stored class budgets disagree with the schedule".to_string(),
            ));
        }
        Ok(s)
    }
}

/// Counts adversarial hits per class over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTracker {
    correct: Vec<usize>,
    seen: Vec<usize>,
}

impl AccuracyTracker {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: vec![0; num_classes],
            seen: vec![0; num_classes],
        }
    }

    pub fn record(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(domain_err!("{} predictions for {} labels", predictions.len(), labels.len()));
        }
        let k = self.seen.len();
        for (&p, &y) in predictions.iter().zip(labels) {
            if y >= k {
                return Err(domain_err!("label {y} out of range for {k} classes"));
            }
            self.seen[y] += 1;
            if p == y {
                self.correct[y] += 1;
            }
        }
        Ok(())
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    /// Accuracy per class; `None` for classes with no samples this epoch.
    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.seen)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }

    /// End-of-epoch schedule refresh. Classes unseen this epoch keep their
    /// previous accuracy.
    pub fn apply(&self, state: &ClassState) -> Result<ClassState> {
        if self.seen.len() != state.num_classes() {
            return Err(domain_err!(
                "tracker has {} classes, state has {}",
                self.seen.len(),
                state.num_classes()
            ));
        }
        let acc = self
            .accuracies()
            .into_iter()
            .zip(state.accuracies())
            .map(|(new, &old)| new.unwrap_or(old))
            .collect();
        ClassState::from_accuracies(acc, state.params)
    }
}

/// One-shot form of the epoch update from accumulated predictions.
pub fn update_class_stats(adv_predictions: &[usize], labels: &[usize], state: &ClassState) -> Result<ClassState> {
    let mut t = AccuracyTracker::new(state.num_classes());
    t.record(adv_predictions, labels)?;
    t.apply(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size as a fraction of each sample's budget.
    pub step_fraction: f64,
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_fraction: 0.25,
            random_init: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(domain_err!("attack steps must be >= 1"));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(domain_err!("step_fraction must lie in (0, 1], got {}", self.step_fraction));
        }
        Ok(())
    }
}

/// Per-sample `[B, 1, .., 1]` tensor broadcastable against `x`.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// Uniform draw inside each sample's L-infinity ball.
pub fn random_start(x: &Tensor, eps: &[f64], rng: &mut impl Rng) -> Result<Tensor> {
    let per = x.elem_count() / x.dim(0)?;
    let mut data = Vec::with_capacity(x.elem_count());
    for &e in eps {
        for _ in 0..per {
            data.push(e * rng.random_range(-1.0..=1.0));
        }
    }
    Ok(Tensor::from_vec(data, x.shape(), x.device())?.to_dtype(x.dtype())?)
}

/// Clips `delta` into `[-eps_n, eps_n]` per sample.
fn project(delta: &Tensor, eps_t: &Tensor) -> Result<Tensor> {
    Ok(delta.broadcast_minimum(eps_t)?.broadcast_maximum(&eps_t.neg()?)?)
}

/// Projected sign-gradient ascent on `KL(f(x_c) || f(x'))` inside each
/// sample's L-infinity ball of radius `eps[n]`.
///
/// `x_c` is treated as a constant, as are the clean logits. The returned
/// `x'` satisfies `|x' - x_c|_inf <= eps[n]` per sample, and equals `x_c`
/// exactly where `eps[n] == 0`.
pub fn generate_adversarial<F>(
    x_c: &Tensor,
    classifier: F,
    eps: &[f64],
    attack: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    attack.validate()?;
    let x = x_c.detach();
    if eps.len() != x.dim(0)? {
        return Err(domain_err!("{} budgets for a batch of {}", eps.len(), x.dim(0)?));
    }
    if let Some(e) = eps.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(domain_err!("perturbation budget must be finite and >= 0, got {e}"));
    }
    if eps.iter().all(|&e| e == 0.0) {
        return Ok(x);
    }
    let eps_t = per_sample(eps, &x)?;
    let step_t = per_sample(&eps.iter().map(|e| e * attack.step_fraction).collect::<Vec<_>>(), &x)?;
    let clean = classifier(&x)?.detach();
    let mut delta = if attack.random_init {
        project(&random_start(&x, eps, rng)?, &eps_t)?
    } else {
        x.zeros_like()?
    };
    for _ in 0..attack.steps {
        let d = Var::from_tensor(&delta)?;
        let adv_logits = classifier(&(&x + d.as_tensor())?)?;
        let kl = kl_per_sample(&clean, &adv_logits)?.sum_all()?;
        let grads = kl.backward()?;
        let g = grads
            .get(d.as_tensor())
            .ok_or_else(|| Error::NonFinite {
                component: "attack gradient (disconnected)".to_string(),
            })?
            .clone();
        let norm = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                component: "attack gradient".to_string(),
            });
        }
        delta = project(&(delta + g.sign()?.broadcast_mul(&step_t)?)?, &eps_t)?;
    }
    Ok((x + delta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_hand_values() {
        assert_eq!(class_epsilon(0.0, 0.0, 0.03).unwrap(), 0.0);
        assert_eq!(class_epsilon(1.0, 0.0, 0.03).unwrap(), 0.03);
        assert!((class_epsilon(0.5, 0.5, 8.0 / 255.0).unwrap() - 0.031_372_549).abs() < 1e-9);
        assert!(class_epsilon(1.2, 0.5, 0.03).is_err());
    }

    #[test]
    fn beta_hand_values() {
        assert_eq!(class_beta(0.0, 0.0, 6.0).unwrap(), 0.0);
        assert_eq!(class_beta(0.7, 0.5, 0.0).unwrap(), 0.0);
        assert!((class_beta(0.5, 0.5, 6.0).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert!(class_beta(0.5, -0.1, 6.0).is_err());
    }

    #[test]
    fn initial_state_follows_schedule() {
        let p = ScheduleParams::default();
        let s = ClassState::new(3, p).unwrap();
        for i in 0..3 {
            assert_eq!(s.epsilons()[i], p.sigma * p.epsilon);
            assert_eq!(s.betas()[i], p.mu * p.beta / (1.0 + p.mu * p.beta));
        }
    }

    #[test]
    fn perfect_epoch() {
        let p = ScheduleParams::default();
        let s = ClassState::new(2, p).unwrap();
        let s = update_class_stats(&[0, 1, 1, 0], &[0, 1, 1, 0], &s).unwrap();
        assert_eq!(s.accuracies(), &[1.0, 1.0]);
        assert_eq!(s.epsilons(), &[(p.sigma + 1.0) * p.epsilon; 2]);
    }

    #[test]
    fn counting_and_stale_classes() {
        let p = ScheduleParams::default();
        let s = ClassState::from_accuracies(vec![0.1, 0.2, 0.4], p).unwrap();
        let s = update_class_stats(&[0, 0, 1, 0], &[0, 0, 0, 0], &s).unwrap();
        assert_eq!(s.accuracies(), &[0.75, 0.2, 0.4]);
        assert!(update_class_stats(&[0], &[5], &s).is_err());
    }

    #[test]
    fn fixed_and_off_modes() {
        let p = ScheduleParams {
            mode: ScheduleMode::Fixed,
            ..ScheduleParams::default()
        };
        let s = ClassState::from_accuracies(vec![0.1, 0.9], p).unwrap();
        assert_eq!(s.epsilons(), &[p.epsilon; 2]);
        assert_eq!(s.betas(), &[6.0 / 7.0; 2]);
        let off = ClassState::from_accuracies(
            vec![0.3, 0.9],
            ScheduleParams {
                mode: ScheduleMode::Off,
                ..p
            },
        )
        .unwrap();
        assert_eq!(off.epsilons(), &[0.0; 2]);
        assert_eq!(off.betas(), &[0.0; 2]);
    }
}
