//! Independent finite-difference references for the rod problems.
//!
//! These deliberately share no code with the closed-form solvers: a
//! velocity-Verlet march of the semi-discretized wave equation, and a
//! Sturm-sequence eigensolver for the discrete natural frequencies. They
//! exist to cross-check the production paths and are not performance-tuned.

use crate::analytic::{FieldHistory, HarmonicLoad, LoadKind, RodBc, RodSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial resolution and stability margin of the finite-difference march.
#[derive(Debug, Clone, Copy)]
pub struct FdRodOptions {
    /// Number of grid nodes (element count + 1).
    pub nodes: usize,
    /// Courant number target; the step is shrunk to land output times exactly.
    pub cfl: f64,
}

impl Default for FdRodOptions {
    fn default() -> Self {
        Self { nodes: 2001, cfl: 0.9 }
    }
}

/// Semi-discrete rod with half-cell end masses; springs and loads enter
/// through the end rows so the system stays symmetric (energy-consistent).
struct FdRod {
    h: f64,
    c2_h2: f64,
    fixed_left: bool,
    k1_term: f64,
    k2_term: f64,
    rho_a: f64,
}

impl FdRod {
    fn new(rod: &RodSpec, nodes: usize) -> Result<Self> {
        if nodes < 16 {
            return Err(Error::Config(format!("finite-difference grid needs ≥ 16 nodes, got {nodes}")));
        }
        let h = rod.length / (nodes - 1) as f64;
        let rho_a = rod.mass_per_length();
        let (fixed_left, k1, k2) = match rod.bc {
            RodBc::FixedFree => (true, 0.0, 0.0),
            RodBc::SpringSpring { k1, k2 } => (false, k1, k2),
        };
        Ok(Self {
            h,
            c2_h2: rod.wave_speed().powi(2) / (h * h),
            fixed_left,
            k1_term: 2.0 * k1 / (rho_a * h),
            k2_term: 2.0 * k2 / (rho_a * h),
            rho_a,
        })
    }

    /// Acceleration of every node; `point` is an end force in newtons and
    /// `dist` a force per unit length, both already evaluated at the time.
    fn accel(&self, u: &[f64], point: f64, dist: f64, out: &mut [f64]) {
        let n = u.len() - 1;
        let body = dist / self.rho_a;
        out[0] = if self.fixed_left {
            0.0
        } else {
            2.0 * self.c2_h2 * (u[1] - u[0]) - self.k1_term * u[0] + body
        };
        for j in 1..n {
            out[j] = self.c2_h2 * (u[j + 1] - 2.0 * u[j] + u[j - 1]) + body;
        }
        out[n] = 2.0 * self.c2_h2 * (u[n - 1] - u[n]) - self.k2_term * u[n]
            + 2.0 * point / (self.rho_a * self.h)
            + body;
    }
}

fn split_load(load: &HarmonicLoad, t: f64) -> (f64, f64) {
    match load.kind {
        LoadKind::BoundaryPoint => (load.value(t), 0.0),
        LoadKind::UniformDistributed => (0.0, load.value(t)),
    }
}

fn validate_output_grid(t_grid: &[f64]) -> Result<f64> {
    if t_grid.len() < 2 || t_grid[0] != 0.0 {
        return Err(Error::Config("output times must start at 0 with at least one step".into()));
    }
    let dt = t_grid[1] - t_grid[0];
    for w in t_grid.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
            return Err(Error::Config("output times must be uniformly spaced".into()));
        }
    }
    Ok(dt)
}

/// March the rod from the given initial state and sample it on the requested
/// space–time grid. Row 0 of the result is exactly the initial state.
pub fn rod_fd_response(
    rod: &RodSpec,
    load: &HarmonicLoad,
    u0: impl Fn(f64) -> f64,
    v0: impl Fn(f64) -> f64,
    x_grid: &[f64],
    t_grid: &[f64],
    opt: &FdRodOptions,
) -> Result<FieldHistory> {
    let out_dt = validate_output_grid(t_grid)?;
    let fd = FdRod::new(rod, opt.nodes)?;
    if !(opt.cfl > 0.0 && opt.cfl < 1.0) {
        return Err(Error::Config(format!("Courant number {} must be in (0, 1)", opt.cfl)));
    }
    let substeps = (out_dt / (opt.cfl * fd.h / rod.wave_speed())).ceil() as usize;
    let dt = out_dt / substeps as f64;

    let n = opt.nodes;
    let mut u: Vec<f64> = (0..n).map(|j| u0(j as f64 * fd.h)).collect();
    let mut v: Vec<f64> = (0..n).map(|j| v0(j as f64 * fd.h)).collect();
    if fd.fixed_left {
        u[0] = 0.0;
        v[0] = 0.0;
    }
    let mut a = vec![0.0; n];
    let mut a_next = vec![0.0; n];
    let (p, q) = split_load(load, 0.0);
    fd.accel(&u, p, q, &mut a);

    let sample_row = |state: &[f64], row: &mut [f64]| {
        for (dst, &x) in row.iter_mut().zip(x_grid) {
            let pos = (x / fd.h).min((n - 1) as f64);
            let j = (pos.floor() as usize).min(n - 2);
            let frac = pos - j as f64;
            *dst = (1.0 - frac) * state[j] + frac * state[j + 1];
        }
    };

    let n_x = x_grid.len();
    let mut out_u = Tensor::zeros(&[t_grid.len(), n_x]);
    let mut out_v = Tensor::zeros(&[t_grid.len(), n_x]);
    sample_row(&u, &mut out_u.data_mut()[..n_x]);
    sample_row(&v, &mut out_v.data_mut()[..n_x]);

    let mut total_steps = 0usize;
    for row in 1..t_grid.len() {
        for _ in 0..substeps {
            for j in 0..n {
                u[j] += dt * v[j] + 0.5 * dt * dt * a[j];
            }
            total_steps += 1;
            let t = total_steps as f64 * dt;
            let (p, q) = split_load(load, t);
            fd.accel(&u, p, q, &mut a_next);
            for j in 0..n {
                v[j] += 0.5 * dt * (a[j] + a_next[j]);
            }
            std::mem::swap(&mut a, &mut a_next);
        }
        sample_row(&u, &mut out_u.data_mut()[row * n_x..(row + 1) * n_x]);
        sample_row(&v, &mut out_v.data_mut()[row * n_x..(row + 1) * n_x]);
    }
    FieldHistory::new(x_grid.to_vec(), t_grid.to_vec(), out_u, out_v)
}

/// Total mechanical energy of the semi-discrete state, springs included.
fn fd_energy(rod: &RodSpec, fd: &FdRod, u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() - 1;
    let (rho_a, ea, h) = (rod.mass_per_length(), rod.axial_rigidity(), fd.h);
    let mut kinetic = 0.5 * rho_a * h * (0.5 * v[0] * v[0] + 0.5 * v[n] * v[n]);
    for &vj in &v[1..n] {
        kinetic += 0.5 * rho_a * h * vj * vj;
    }
    let mut potential = 0.0;
    for w in u.windows(2) {
        let strain = w[1] - w[0];
        potential += 0.5 * ea * strain * strain / h;
    }
    if let RodBc::SpringSpring { k1, k2 } = rod.bc {
        potential += 0.5 * k1 * u[0] * u[0] + 0.5 * k2 * u[n] * u[n];
    }
    kinetic + potential
}

/// Free-vibration march reporting the largest relative drift of the total
/// energy over `[0, t_end]`.
pub fn rod_fd_energy_drift(
    rod: &RodSpec,
    u0: impl Fn(f64) -> f64,
    v0: impl Fn(f64) -> f64,
    t_end: f64,
    opt: &FdRodOptions,
) -> Result<f64> {
    if !(t_end > 0.0) {
        return Err(Error::Config("drift horizon must be positive".into()));
    }
    let fd = FdRod::new(rod, opt.nodes)?;
    let steps = (t_end / (opt.cfl * fd.h / rod.wave_speed())).ceil() as usize;
    let dt = t_end / steps as f64;

    let n = opt.nodes;
    let mut u: Vec<f64> = (0..n).map(|j| u0(j as f64 * fd.h)).collect();
    let mut v: Vec<f64> = (0..n).map(|j| v0(j as f64 * fd.h)).collect();
    if fd.fixed_left {
        u[0] = 0.0;
        v[0] = 0.0;
    }
    let e0 = fd_energy(rod, &fd, &u, &v);
    if e0 <= 0.0 {
        return Err(Error::Config("initial state carries no energy".into()));
    }
    let mut a = vec![0.0; n];
    let mut a_next = vec![0.0; n];
    fd.accel(&u, 0.0, 0.0, &mut a);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        for j in 0..n {
            u[j] += dt * v[j] + 0.5 * dt * dt * a[j];
        }
        fd.accel(&u, 0.0, 0.0, &mut a_next);
        for j in 0..n {
            v[j] += 0.5 * dt * (a[j] + a_next[j]);
        }
        std::mem::swap(&mut a, &mut a_next);
        worst = worst.max((fd_energy(rod, &fd, &u, &v) - e0).abs() / e0);
    }
    Ok(worst)
}

/// Smallest `count` eigenvalues of a symmetric tridiagonal matrix by Sturm
/// bisection. `diag` has length n, `off` length n−1.
pub fn tridiag_smallest_eigs(diag: &[f64], off: &[f64], count: usize) -> Result<Vec<f64>> {
    if diag.is_empty() || off.len() + 1 != diag.len() {
        return Err(Error::ShapeMismatch {
            op: "tridiagonal eigenvalues",
            detail: format!("diagonal {} vs off-diagonal {}", diag.len(), off.len()),
        });
    }
    if count == 0 || count > diag.len() {
        return Err(Error::Config(format!(
            "requested {count} eigenvalues of a {}×{0} matrix",
            diag.len()
        )));
    }
    // Gershgorin enclosure of the whole spectrum.
    let radius = |i: usize| {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i < off.len() { off[i].abs() } else { 0.0 };
        left + right
    };
    let mut lo_all = f64::INFINITY;
    let mut hi_all = f64::NEG_INFINITY;
    for (i, &d) in diag.iter().enumerate() {
        lo_all = lo_all.min(d - radius(i));
        hi_all = hi_all.max(d + radius(i));
    }

    // Count of eigenvalues strictly below lambda = negative pivots of the
    // LDLᵀ factorization of T − lambda·I.
    let count_below = |lambda: f64| {
        let tiny = f64::MIN_POSITIVE / f64::EPSILON;
        let mut negatives = 0usize;
        let mut pivot = diag[0] - lambda;
        if pivot < 0.0 {
            negatives += 1;
        }
        for i in 1..diag.len() {
            let denom = if pivot.abs() < tiny {
                if pivot < 0.0 {
                    -tiny
                } else {
                    tiny
                }
            } else {
                pivot
            };
            pivot = diag[i] - lambda - off[i - 1] * off[i - 1] / denom;
            if pivot < 0.0 {
                negatives += 1;
            }
        }
        negatives
    };

    let scale = lo_all.abs().max(hi_all.abs()).max(1.0);
    let mut eigs = Vec::with_capacity(count);
    for j in 0..count {
        let (mut lo, mut hi) = (lo_all, hi_all);
        while hi - lo > 1e-14 * scale {
            let mid = 0.5 * (lo + hi);
            if count_below(mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        eigs.push(0.5 * (lo + hi));
    }
    Ok(eigs)
}

/// First `count` natural frequencies of the finite-difference rod on the
/// given node count, via the generalized eigenproblem `K u = ω² M u` reduced
/// to symmetric tridiagonal form by the lumped-mass square root.
pub fn rod_fd_frequencies(rod: &RodSpec, count: usize, nodes: usize) -> Result<Vec<f64>> {
    let fd = FdRod::new(rod, nodes)?;
    let (h, rho_a, ea) = (fd.h, rod.mass_per_length(), rod.axial_rigidity());
    let stiff = ea / h;

    // Assemble (diag of K, mass vector) for the retained nodes.
    let (mut k_diag, mass): (Vec<f64>, Vec<f64>) = match rod.bc {
        RodBc::FixedFree => {
            let size = nodes - 1;
            let mut kd = vec![2.0 * stiff; size];
            kd[size - 1] = stiff;
            let mut m = vec![rho_a * h; size];
            m[size - 1] = 0.5 * rho_a * h;
            (kd, m)
        }
        RodBc::SpringSpring { k1, k2 } => {
            let mut kd = vec![2.0 * stiff; nodes];
            kd[0] = stiff + k1;
            kd[nodes - 1] = stiff + k2;
            let mut m = vec![rho_a * h; nodes];
            m[0] = 0.5 * rho_a * h;
            m[nodes - 1] = 0.5 * rho_a * h;
            (kd, m)
        }
    };
    for (k, m) in k_diag.iter_mut().zip(&mass) {
        *k /= m;
    }
    let off: Vec<f64> = mass
        .windows(2)
        .map(|w| -stiff / (w[0] * w[1]).sqrt())
        .collect();
    let lambdas = tridiag_smallest_eigs(&k_diag, &off, count)?;
    Ok(lambdas.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn table_rod(bc: RodBc) -> RodSpec {
        RodSpec::new(1.0, 1e-4, 1e7, 9000.0, bc, 200).unwrap()
    }

    #[test]
    fn sturm_matches_laplacian_spectrum() {
        // tridiag(-1, 2, -1) of order n has eigenvalues 2 − 2cos(jπ/(n+1)).
        let n = 50;
        let eigs = tridiag_smallest_eigs(&vec![2.0; n], &vec![-1.0; n - 1], 5).unwrap();
        for (j, e) in eigs.iter().enumerate() {
            let exact = 2.0 - 2.0 * ((j + 1) as f64 * PI / (n + 1) as f64).cos();
            assert!((e - exact).abs() < 1e-12 * exact.max(1.0), "{e} vs {exact}");
        }
    }

    #[test]
    fn sturm_rejects_bad_shapes() {
        assert!(tridiag_smallest_eigs(&[1.0, 2.0], &[], 1).is_err());
        assert!(tridiag_smallest_eigs(&[1.0, 2.0], &[0.5], 3).is_err());
    }

    #[test]
    fn fd_frequencies_match_fixed_free_closed_form() {
        let rod = table_rod(RodBc::FixedFree);
        let freqs = rod_fd_frequencies(&rod, 5, 2001).unwrap();
        let c = rod.wave_speed();
        for (r, f) in freqs.iter().enumerate() {
            let exact = (2 * r + 1) as f64 * PI * c / 2.0;
            assert!((f - exact).abs() < 1e-4 * exact, "{f} vs {exact}");
        }
    }

    #[test]
    fn fd_standing_wave_matches_closed_form() {
        // A single fixed-free mode initialized at rest oscillates as
        // u0(x)·cos(ω₁ t); probe at x = 0.6, t = 0.1 s.
        let rod = table_rod(RodBc::FixedFree);
        let quiet = HarmonicLoad::new(0.0, 1.0, LoadKind::BoundaryPoint).unwrap();
        let amp = 1e-3;
        let u0 = move |x: f64| amp * (PI * x / 2.0).sin();
        let x: Vec<f64> = (0..51).map(|i| i as f64 / 50.0).collect();
        let t: Vec<f64> = (0..=100).map(|i| i as f64 * 1e-3).collect();
        let h =
            rod_fd_response(&rod, &quiet, u0, |_| 0.0, &x, &t, &FdRodOptions::default()).unwrap();
        // Row 0 is exactly the initial state.
        assert_eq!(h.u.at2(0, 30), u0(0.6));
        assert!(h.u_dot.row(0).iter().all(|&v| v == 0.0));
        let w1 = PI * rod.wave_speed() / 2.0;
        let expected = u0(0.6) * (w1 * 0.1).cos();
        let got = h.u.at2(100, 30);
        assert!((got - expected).abs() < 1e-4 * expected.abs(), "{got} vs {expected}");
        // Velocity probe: -ω₁ u0 sin(ω₁ t).
        let vexp = -w1 * u0(0.6) * (w1 * 0.1).sin();
        let vgot = h.u_dot.at2(100, 30);
        assert!((vgot - vexp).abs() < 1e-4 * vexp.abs(), "{vgot} vs {vexp}");
    }

    #[test]
    fn fd_zero_state_stays_zero() {
        let rod = table_rod(RodBc::SpringSpring { k1: 500.0, k2: 2000.0 });
        let quiet = HarmonicLoad::new(0.0, 1.0, LoadKind::UniformDistributed).unwrap();
        let x = [0.0, 0.5, 1.0];
        let t = [0.0, 1e-3, 2e-3];
        let h = rod_fd_response(&rod, &quiet, |_| 0.0, |_| 0.0, &x, &t, &FdRodOptions::default())
            .unwrap();
        assert!(h.u.data().iter().all(|&v| v == 0.0));
        assert!(h.u_dot.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_energy_drift_is_small_for_free_vibration() {
        let rod = table_rod(RodBc::SpringSpring { k1: 500.0, k2: 2000.0 });
        let drift = rod_fd_energy_drift(
            &rod,
            |x| 1e-3 * ((PI * x).sin() + 0.3),
            |_| 0.0,
            0.5,
            &FdRodOptions::default(),
        )
        .unwrap();
        assert!(drift < 1e-3, "energy drift {drift}");
    }

    #[test]
    fn fd_rejects_bad_grids() {
        let rod = table_rod(RodBc::FixedFree);
        let load = HarmonicLoad::new(1.0, 100.0, LoadKind::BoundaryPoint).unwrap();
        let bad_t = [0.0, 1e-3, 3e-3];
        assert!(rod_fd_response(&rod, &load, |_| 0.0, |_| 0.0, &[0.0, 1.0], &bad_t,
            &FdRodOptions::default())
        .is_err());
        let no_zero = [1e-3, 2e-3];
        assert!(rod_fd_response(&rod, &load, |_| 0.0, |_| 0.0, &[0.0, 1.0], &no_zero,
            &FdRodOptions::default())
        .is_err());
    }
}
