//! Adaptive Simpson quadrature.

use crate::error::{Error, Result};

/// Integrate `f` over `[a, b]` to a tolerance relative to the integral of |f|.
///
/// Classic recursive Simpson with Richardson correction. The interval is first
/// split into 32 base panels so oscillatory integrands cannot fool the initial
/// error estimate; each panel then refines until the local error estimate drops
/// below its share of `rel_tol * ∫|f|`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() || a >= b {
        return Err(Error::Config(format!(
            "quadrature interval [{a}, {b}] must be finite and increasing"
        )));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::Config(format!(
            "quadrature tolerance {rel_tol} must be positive"
        )));
    }

    // L1 magnitude estimate for the tolerance scale (513-point trapezoid of |f|).
    let samples = 512;
    let h = (b - a) / samples as f64;
    let mut l1 = 0.0;
    for i in 0..=samples {
        let w = if i == 0 || i == samples { 0.5 } else { 1.0 };
        l1 += w * f(a + i as f64 * h).abs();
    }
    l1 *= h;
    let eps = rel_tol * l1.max(f64::MIN_POSITIVE);

    let panels = 32;
    let eps_panel = eps / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let pa = a + (b - a) * i as f64 / panels as f64;
        let pb = a + (b - a) * (i + 1) as f64 / panels as f64;
        let (fa, fm, fb) = (f(pa), f(0.5 * (pa + pb)), f(pb));
        let whole = simpson(pa, pb, fa, fm, fb);
        total += refine(&f, pa, pb, fa, fm, fb, whole, eps_panel, 48)?;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("quadrature result".into()));
    }
    Ok(total)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * eps || (b - a) < f64::EPSILON * (a.abs() + b.abs()) {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numeric(format!(
            "quadrature failed to converge on [{a}, {b}]"
        )));
    }
    let half = 0.5 * eps;
    Ok(refine(f, a, m, fa, flm, fm, left, half, depth - 1)?
        + refine(f, m, b, fm, frm, fb, right, half, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn integrates_sine_over_half_period() {
        let v = adaptive_simpson(f64::sin, 0.0, PI, 1e-12).unwrap();
        assert!((v - 2.0).abs() < 1e-11);
    }

    #[test]
    fn cubic_is_exact() {
        let v = adaptive_simpson(|x| x * x * x, 0.0, 1.0, 1e-10).unwrap();
        assert!((v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn exponential_matches_closed_form() {
        let v = adaptive_simpson(f64::exp, 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_integrand_converges() {
        // ∫₀¹ cos(100x) dx = sin(100)/100; L1 magnitude ≈ 2/π so the absolute
        // error budget at rel_tol 1e-10 is ~6e-11.
        let v = adaptive_simpson(|x| (100.0 * x).cos(), 0.0, 1.0, 1e-10).unwrap();
        assert!((v - 100f64.sin() / 100.0).abs() < 1e-10);
    }

    #[test]
    fn spring_mode_shape_matches_closed_form() {
        // U(x) = cos(kx) + (a/k) sin(kx) for a high oscillatory mode.
        let (k, a): (f64, f64) = (628.3, 0.5);
        let exact = (k).sin() / k + a / (k * k) * (1.0 - k.cos());
        let v = adaptive_simpson(|x| (k * x).cos() + a / k * (k * x).sin(), 0.0, 1.0, 1e-10)
            .unwrap();
        assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
        let exact2 = 0.5 + (2.0 * k).sin() / (4.0 * k)
            + a / (k * k) * k.sin().powi(2)
            + (a / k).powi(2) * (0.5 - (2.0 * k).sin() / (4.0 * k));
        let v2 = adaptive_simpson(
            |x| ((k * x).cos() + a / k * (k * x).sin()).powi(2),
            0.0,
            1.0,
            1e-10,
        )
        .unwrap();
        assert!((v2 - exact2).abs() < 1e-10, "{v2} vs {exact2}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(adaptive_simpson(|x| x, 1.0, 0.0, 1e-8).is_err());
        assert!(adaptive_simpson(|x| x, 0.0, 1.0, 0.0).is_err());
        assert!(adaptive_simpson(|x| x, f64::NAN, 1.0, 1e-8).is_err());
    }
}
