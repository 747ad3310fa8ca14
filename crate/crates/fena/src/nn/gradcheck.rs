//! Finite-difference utilities used to verify analytic gradients.
//!
//! These deliberately share no code with the tape: they probe a closure that
//! maps a flat parameter slice to a scalar, nothing more.

/// Central-difference gradient of `f` at `x` with half-step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error between two gradient vectors, with an
/// absolute floor so that near-zero pairs compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_on_quadratic_is_exact_to_truncation() {
        let x = [1.5, -2.0, 0.25];
        let grad = central_diff(&x, 1e-6, |v| v.iter().map(|&t| t * t).sum());
        let expect = [3.0, -4.0, 0.5];
        assert!(max_rel_err(&grad, &expect) < 1e-8);
    }

    #[test]
    fn rel_err_uses_absolute_floor_near_zero() {
        assert!(max_rel_err(&[1e-12], &[0.0]) < 1e-5);
        assert!(max_rel_err(&[1.0], &[2.0]) > 0.4);
    }
}
