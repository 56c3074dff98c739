//! Central finite-difference verification of analytic gradients.

use nalgebra::DVector;

/// Compares `analytic` against central differences of `f` around `x` and
/// returns the worst per-coordinate discrepancy, measured relative to
/// `max(1, |fd|)` so tiny gradients are judged on absolute error.
pub fn check_gradient<F>(mut f: F, analytic: &DVector<f64>, x: &DVector<f64>, step: f64) -> f64
where
    F: FnMut(&DVector<f64>) -> f64,
{
    assert_eq!(analytic.len(), x.len());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        let fd = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
