//! Central finite differences for validating analytic gradients.

/// Estimates the gradient of `f` at `params` by central differences with
/// step `h`: `(f(p + h e_i) - f(p - h e_i)) / (2h)` per coordinate.
///
/// The closure receives the full perturbed parameter vector. This is the
/// reference oracle the analytic backward passes are tested against; it
/// never looks at them.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic and an estimated derivative, with a
/// floor that keeps the ratio meaningful when both are near zero.
pub fn relative_error(analytic: f64, estimate: f64) -> f64 {
    let denom = analytic.abs().max(estimate.abs()).max(1e-6);
    (analytic - estimate).abs() / denom
}
