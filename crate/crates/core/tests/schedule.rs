use icfd::adversary::{class_beta, class_epsilon, AccuracyTracker, ClassState, ScheduleMode, ScheduleParams};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn budget_matches_direct_evaluation(acc in 0.0..=1.0f64, sigma in 0.0..2.0f64, eps in 0.0..0.5f64) {
        let got = class_epsilon(acc, sigma, eps).unwrap();
        let want = sigma * eps + acc * eps;
        prop_assert!(rel_close(got, want, 1e-12) || (got == 0.0 && want == 0.0));
        prop_assert!(got >= sigma * eps * (1.0 - 1e-12) && got <= (sigma + 1.0) * eps * (1.0 + 1e-12));
    }

    #[test]
    fn weight_matches_direct_evaluation(acc in 0.0..=1.0f64, mu in 0.0..2.0f64, beta in 0.0..20.0f64) {
        let got = class_beta(acc, mu, beta).unwrap();
        let t = mu * beta + acc * beta;
        let want = t / (1.0 + t);
        prop_assert!(rel_close(got, want, 1e-12) || (got == 0.0 && want == 0.0));
        prop_assert!((0.0..1.0).contains(&got));
    }

    #[test]
    fn schedule_is_monotone_in_accuracy(a in 0.0..=1.0f64, b in 0.0..=1.0f64, sigma in 0.0..2.0f64, mu in 0.0..2.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(class_epsilon(lo, sigma, 8.0 / 255.0).unwrap() <= class_epsilon(hi, sigma, 8.0 / 255.0).unwrap());
        prop_assert!(class_beta(lo, mu, 6.0).unwrap() <= class_beta(hi, mu, 6.0).unwrap());
    }

    #[test]
    fn out_of_domain_rejected(acc in 1.0001..5.0f64) {
        prop_assert!(class_epsilon(acc, 0.5, 0.03).is_err());
        prop_assert!(class_epsilon(-acc, 0.5, 0.03).is_err());
        prop_assert!(class_beta(acc, 0.5, 6.0).is_err());
    }

    /// Every sample of a class gets the same budget, and budgets only move
    /// when the tracker is applied at an epoch boundary.
    #[test]
    fn per_class_budgets_are_shared_and_fresh(
        labels in prop::collection::vec(0usize..4, 1..64),
        hits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let state = ClassState::new(4, ScheduleParams::default()).unwrap();
        let eps = state.sample_epsilons(&labels).unwrap();
        for (e, &y) in eps.iter().zip(&labels) {
            prop_assert_eq!(*e, state.epsilons()[y]);
        }
        let preds: Vec<usize> = labels.iter().zip(&hits).map(|(&y, &h)| if h { y } else { (y + 1) % 4 }).collect();
        let mut tracker = AccuracyTracker::new(4);
        tracker.record(&preds, &labels).unwrap();
        prop_assert_eq!(state.sample_epsilons(&labels).unwrap(), eps);
        let next = tracker.apply(&state).unwrap();
        let seen = tracker.seen();
        for c in 0..4 {
            if seen[c] == 0 {
                prop_assert_eq!(next.accuracies()[c], state.accuracies()[c]);
            } else {
                let p = next.params();
                prop_assert_eq!(next.epsilons()[c], class_epsilon(next.accuracies()[c], p.sigma, p.epsilon).unwrap());
            }
        }
    }
}

#[test]
fn fixed_and_off_modes() {
    let mut p = ScheduleParams {
        mode: ScheduleMode::Fixed,
        ..ScheduleParams::default()
    };
    let s = ClassState::from_accuracies(vec![0.0, 0.3, 1.0], p).unwrap();
    assert!(s.epsilons().iter().all(|&e| e == p.epsilon));
    assert!(s.betas().iter().all(|&b| b == p.beta / (1.0 + p.beta)));
    p.mode = ScheduleMode::Off;
    let s = ClassState::from_accuracies(vec![0.0, 0.3, 1.0], p).unwrap();
    assert!(s.epsilons().iter().chain(s.betas()).all(|&v| v == 0.0));
}
