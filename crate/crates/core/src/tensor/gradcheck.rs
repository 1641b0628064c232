//! Finite-difference gradient checking helpers.
//!
//! Used by tests to validate recorded backward passes: build the same scalar
//! loss twice per coordinate with central differences and compare against the
//! gradient the tape produced. Run these with f64 tensors; f32 storage
//! rounding alone exceeds tight comparison thresholds.

/// Central-difference gradient of `f` at `x0`: each coordinate perturbed by
/// `+step` and `-step` with everything else held fixed.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`. The
/// floor keeps near-zero coordinates from blowing up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
