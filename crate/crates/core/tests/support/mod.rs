//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use icfd::losses::{calibrated_at_loss, common_loss, specific_loss};
use icfd::nn::{IcBlock, ParamBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn fd_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let at = |v: Vec<f64>| Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += FD_STEP;
            let fp = f(&at(p.clone()));
            p[i] -= 2.0 * FD_STEP;
            let fm = f(&at(p));
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|g - fd| / |fd|` over the whole gradient vector.
pub fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let diff = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
    diff / norm
}

/// Autodiff gradient of a scalar function against finite differences.
pub fn input_gradient_error(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let v = Var::from_tensor(x).unwrap();
    let grads = f(v.as_tensor()).backward().unwrap();
    let g: Vec<f64> = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    relative_error(&g, &fd_gradient(x, |t| scalar(&f(t))))
}

/// Gradient checks for every differentiable piece, as `(name, relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();

    let target = random(&[2, 1, 8, 8], 0.0, 1.0, 1);
    let x_hat = random(&[2, 1, 8, 8], 0.0, 1.0, 2);
    out.push(("common_loss".into(), input_gradient_error(&x_hat, |xh| common_loss(&target, xh, 1e-3).unwrap())));

    let scores = random(&[5, 4], -3.0, 3.0, 3);
    out.push(("specific_loss".into(), input_gradient_error(&scores, |s| specific_loss(s, &[0, 1, 2, 3, 1]).unwrap())));

    let labels = [0, 2, 1, 3, 2, 0];
    let betas = [0.1, 0.5, 0.85, 0.3];
    let clean = random(&[6, 4], -2.0, 2.0, 4);
    let adv = random(&[6, 4], -2.0, 2.0, 5);
    out.push((
        "calibrated_at_loss/clean".into(),
        input_gradient_error(&clean, |c| calibrated_at_loss(c, &adv, &labels, &betas).unwrap()),
    ));
    out.push((
        "calibrated_at_loss/adv".into(),
        input_gradient_error(&adv, |a| calibrated_at_loss(&clean, a, &labels, &betas).unwrap()),
    ));

    let pb = ParamBuilder::new(9, DType::F64, &Device::Cpu);
    let block = IcBlock::new(&pb.pp("block"), 4, 2, &[2, 3]).unwrap();
    let store = pb.finish();
    let x = random(&[1, 4, 8, 8], -1.0, 1.0, 6);
    let probe = random(&[1, 4, 8, 8], -1.0, 1.0, 7);
    let project = |y: Tensor| (y * &probe).unwrap().sum_all().unwrap();
    out.push(("icblock/input".into(), input_gradient_error(&x, |xi| project(block.forward(xi).unwrap()))));

    // a weight on the attention path, perturbed through the store
    let (name, var) = store
        .iter()
        .find(|(n, _)| n.contains("attn") && n.ends_with("weight"))
        .expect("attention weight");
    let w0 = var.as_tensor().copy().unwrap();
    let grads = project(block.forward(&x).unwrap()).backward().unwrap();
    let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let fd = fd_gradient(&w0, |w| {
        store.assign(name, w).unwrap();
        scalar(&project(block.forward(&x).unwrap()))
    });
    store.assign(name, &w0).unwrap();
    out.push((format!("icblock/{name}"), relative_error(&g, &fd)));
    out
}

/// Nested-loop second difference with clamped (replicated) borders.
pub fn laplacian_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        }
    }
    out
}

/// Largest deviation of `laplacian` from the oracle over `n` random 16x16 images.
pub fn laplacian_max_error(n: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..n {
        let img: Vec<f64> = (0..256).map(|_| r.random_range(0.0..1.0)).collect();
        let t = Tensor::from_vec(img.clone(), (1, 16, 16), &Device::Cpu).unwrap();
        let got: Vec<f64> = icfd::losses::laplacian(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in got.iter().zip(laplacian_oracle(&img, 16, 16)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub struct AttackStats {
    /// Largest `|x' - x_c|_inf - eps_n` over the batch.
    pub max_excess: f64,
    /// Samples whose endpoint KL is at least their random-start KL.
    pub raised: usize,
    pub total: usize,
    pub zero_budget_exact: bool,
}

/// Runs the default attack against a seeded toy classifier on `n` random
/// 16x16 images with schedule budgets drawn from four class accuracies.
pub fn attack_contract(n: usize) -> AttackStats {
    use icfd::adversary::{generate_adversarial, random_start, AttackConfig, ClassState, ScheduleParams};
    use icfd::classifier::{build_classifier, ClassifierConfig};
    use icfd::losses::kl_per_sample;

    let dev = Device::Cpu;
    let x = random(&[n, 1, 16, 16], 0.0, 1.0, 5);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let clf = build_classifier(&ClassifierConfig::default(), 1, 4, 16, 11, DType::F64, &dev).unwrap();
    let f = |t: &Tensor| Ok(clf.forward(t)?);
    let state = ClassState::from_accuracies(vec![0.1, 0.4, 0.7, 1.0], ScheduleParams::default()).unwrap();
    let eps = state.sample_epsilons(&labels).unwrap();
    let attack = AttackConfig::default();
    let rng = ChaCha8Rng::seed_from_u64(99);

    let adv = generate_adversarial(&x, f, &eps, &attack, &mut rng.clone()).unwrap();
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.flatten_from(1).unwrap().to_vec2().unwrap() };
    let mut max_excess = f64::NEG_INFINITY;
    for ((a, c), e) in rows(&adv).iter().zip(rows(&x)).zip(&eps) {
        let worst = a.iter().zip(&c).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        max_excess = max_excess.max(worst - e);
    }

    // the attack's first draw, replayed from the same stream
    let init = (&x + random_start(&x, &eps, &mut rng.clone()).unwrap()).unwrap();
    let clean = clf.forward(&x).unwrap();
    let kl = |t: &Tensor| -> Vec<f64> { kl_per_sample(&clean, &clf.forward(t).unwrap()).unwrap().to_vec1().unwrap() };
    let raised = kl(&adv).iter().zip(kl(&init)).filter(|(e, i)| **e >= *i).count();

    let x32 = x.to_dtype(DType::F32).unwrap();
    let clf32 = build_classifier(&ClassifierConfig::default(), 1, 4, 16, 11, DType::F32, &dev).unwrap();
    let same = generate_adversarial(&x32, |t| Ok(clf32.forward(t)?), &vec![0.0; n], &attack, &mut rng.clone()).unwrap();
    let bits = |t: &Tensor| -> Vec<u32> { t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect() };

    AttackStats {
        max_excess,
        raised,
        total: n,
        zero_budget_exact: bits(&same) == bits(&x32),
    }
}
