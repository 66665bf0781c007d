//! Autodiff gradients against central finite differences, in f64.

mod support;

#[test]
fn autodiff_matches_finite_differences() {
    let results = support::gradient_suite();
    assert_eq!(results.len(), 6);
    for (name, err) in results {
        assert!(err < support::FD_TOL, "{name}: relative gradient error {err}");
    }
}
