//! Closed-form transient response of an axially loaded rod, for both
//! supported configurations: clamped-free with a harmonic end force, and
//! spring-grounded ends under a uniform distributed load.
//!
//! ```text
//! cargo run --release --example rod_response
//! ```

use fena::analytic::{
    rod_case1_response, rod_natural_frequencies, rod_spring_distributed_response, HarmonicLoad,
    LoadKind, RodBc, RodSpec,
};

fn main() -> fena::Result<()> {
    // A slender steel-like rod: 1 m long, 1 cm^2 section.
    let rod = RodSpec {
        length: 1.0,
        area: 1e-4,
        youngs: 1e7,
        density: 9000.0,
        bc: RodBc::FixedFree,
        r_max: 200,
    };

    let naturals = rod_natural_frequencies(&rod, 5)?;
    println!("clamped-free natural frequencies (rad/s):");
    for (r, w) in naturals.iter().enumerate() {
        println!("  omega_{}: {w:9.3}", r + 1);
    }

    // Drive the free end well below the first resonance and sample the
    // response on a coarse space-time grid.
    let load = HarmonicLoad::new(1.0, 0.6 * naturals[0], LoadKind::BoundaryPoint)?;
    let x: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let t: Vec<f64> = (0..=8).map(|k| k as f64 * 0.005).collect();
    let hist = rod_case1_response(&rod, &load, &x, &t)?;

    println!("\nend-point displacement u(L, t) under a {:.1} rad/s end force:", load.omega0());
    for (k, &tk) in t.iter().enumerate() {
        println!("  t = {tk:.3} s: u = {:+.6e} m", hist.u.row(k)[x.len() - 1]);
    }

    // The same rod grounded through end springs, now loaded along its whole
    // length. The modal basis changes, the calling pattern does not.
    let sprung = RodSpec { bc: RodBc::SpringSpring { k1: 500.0, k2: 2000.0 }, ..rod };
    let dist = HarmonicLoad::new(1.0, 150.0, LoadKind::UniformDistributed)?;
    let hist = rod_spring_distributed_response(&sprung, &dist, &x, &t)?;

    println!("\nmid-point response of the spring-grounded rod:");
    let mid = x.len() / 2;
    for (k, &tk) in t.iter().enumerate() {
        println!(
            "  t = {tk:.3} s: u = {:+.6e} m, u_dot = {:+.6e} m/s",
            hist.u.row(k)[mid],
            hist.u_dot.row(k)[mid]
        );
    }
    Ok(())
}
