//! Helpers shared by unit tests: seeded random inputs and a central
//! finite-difference gradient checker.

use rand::Rng;

use crate::image::ImageBatch;

pub fn random_batch(count: usize, w: usize, h: usize, seed: u64) -> ImageBatch {
    let mut rng = crate::seed::rng(seed, &[crate::seed::tag("test-batch")]);
    let data = (0..count * w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ImageBatch::new(count, w, h, data).unwrap()
}

/// Relative error with a floor at `1e-6` of the largest analytic component,
/// so that coordinates whose true gradient is ~0 are judged on absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, grad_scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6 * grad_scale).max(1e-300);
    (analytic - numeric).abs() / denom
}

/// Compares `grad` against central differences of `f` at every coordinate.
pub fn fd_check(x: &[f64], grad: &[f64], step: f64, tol: f64, f: impl Fn(&[f64]) -> f64) {
    let indices: Vec<usize> = (0..x.len()).collect();
    fd_check_at(x, grad, &indices, step, tol, f);
}

pub fn fd_check_at(
    x: &[f64],
    grad: &[f64],
    indices: &[usize],
    step: f64,
    tol: f64,
    f: impl Fn(&[f64]) -> f64,
) {
    assert_eq!(x.len(), grad.len());
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut probe = x.to_vec();
    for &i in indices {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let err = rel_err(grad[i], numeric, scale);
        assert!(
            err < tol,
            "coordinate {i}: analytic {} vs numeric {numeric} (rel err {err:.3e})",
            grad[i]
        );
    }
}
