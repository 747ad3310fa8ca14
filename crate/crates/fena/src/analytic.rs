//! Closed-form transient solutions for axially vibrating rods under harmonic
//! loading, plus windowed sample extraction from solution histories.
//!
//! Both solvers use modal superposition with the steady-state part summed in
//! closed form (mode acceleration), so series truncation only affects the
//! fast-decaying transient tail. The fixed-free velocity additionally folds
//! the slowest tail into a closed-form traveling-wave term, making every
//! returned field spectrally converged at the default truncation order.

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;
use crate::sample::Sample;
use crate::tensor::Tensor;

/// Boundary configuration of the rod.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RodBc {
    /// Clamped at `x = 0`, free at `x = L`.
    FixedFree,
    /// Linear springs grounding both ends: `EA u'(0) = k1 u(0)` and
    /// `EA u'(L) = -k2 u(L)` (restoring convention at the far end).
    SpringSpring { k1: f64, k2: f64 },
}

/// Uniform rod undergoing axial vibration.
#[derive(Debug, Clone, Copy)]
pub struct RodSpec {
    pub length: f64,
    pub area: f64,
    pub youngs_modulus: f64,
    pub density: f64,
    pub bc: RodBc,
    /// Modal series truncation order.
    pub r_max: usize,
}

impl RodSpec {
    pub fn new(
        length: f64,
        area: f64,
        youngs_modulus: f64,
        density: f64,
        bc: RodBc,
        r_max: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("length", length),
            ("area", area),
            ("youngs_modulus", youngs_modulus),
            ("density", density),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("rod {name} must be positive, got {v}")));
            }
        }
        if let RodBc::SpringSpring { k1, k2 } = bc {
            if !(k1 >= 0.0) || !(k2 >= 0.0) {
                return Err(Error::Config(format!(
                    "spring stiffnesses must be non-negative, got k1={k1}, k2={k2}"
                )));
            }
        }
        if r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        Ok(Self { length, area, youngs_modulus, density, bc, r_max })
    }

    /// Longitudinal wave speed `sqrt(E/ρ)`.
    pub fn wave_speed(&self) -> f64 {
        (self.youngs_modulus / self.density).sqrt()
    }

    /// Axial rigidity `E·A`.
    pub fn axial_rigidity(&self) -> f64 {
        self.youngs_modulus * self.area
    }

    /// Mass per unit length `ρ·A`.
    pub fn mass_per_length(&self) -> f64 {
        self.density * self.area
    }
}

/// How a harmonic load is applied to the structure.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LoadKind {
    /// Point force at the far end, in newtons.
    BoundaryPoint,
    /// Uniform force per unit length, in newtons per meter.
    UniformDistributed,
}

/// `amplitude · sin(omega0 · t)` applied per `kind`.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicLoad {
    pub amplitude: f64,
    pub omega0: f64,
    pub kind: LoadKind,
}

impl HarmonicLoad {
    pub fn new(amplitude: f64, omega0: f64, kind: LoadKind) -> Result<Self> {
        if !amplitude.is_finite() {
            return Err(Error::Config(format!("load amplitude {amplitude} must be finite")));
        }
        if !(omega0 > 0.0) || !omega0.is_finite() {
            return Err(Error::Config(format!(
                "load frequency must be positive, got {omega0}"
            )));
        }
        Ok(Self { amplitude, omega0, kind })
    }

    /// Load value at time `t`.
    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (self.omega0 * t).sin()
    }
}

/// Displacement and velocity fields sampled on a space–time grid.
///
/// Row 0 holds the state at `t[0]`; for histories produced with prescribed
/// initial conditions that first row is exactly the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistory {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub u: Tensor,
    pub u_dot: Tensor,
}

impl FieldHistory {
    pub fn new(x: Vec<f64>, t: Vec<f64>, u: Tensor, u_dot: Tensor) -> Result<Self> {
        for (name, g) in [("x", &x), ("t", &t)] {
            if g.is_empty() || g.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!(
                    "{name} grid must be non-empty and strictly increasing"
                )));
            }
        }
        for (name, f) in [("u", &u), ("u_dot", &u_dot)] {
            if f.shape() != [t.len(), x.len()] {
                return Err(Error::ShapeMismatch {
                    op: "field history",
                    detail: format!(
                        "{name} has shape {:?}, expected [{}, {}]",
                        f.shape(),
                        t.len(),
                        x.len()
                    ),
                });
            }
            if !f.all_finite() {
                return Err(Error::NonFinite(format!("field history {name}")));
            }
        }
        Ok(Self { x, t, u, u_dot })
    }

    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    /// Number of stored time rows (including the initial row).
    pub fn n_rows(&self) -> usize {
        self.t.len()
    }
}

/// Reject loads driving the system within `1e-6` relative of a retained
/// natural frequency, where the modal denominators blow up.
fn check_resonance(omega0: f64, naturals: impl IntoIterator<Item = f64>) -> Result<()> {
    for w in naturals {
        if (omega0 - w).abs() < 1e-6 * w {
            return Err(Error::Numeric(format!(
                "load frequency {omega0} is resonant with natural frequency {w}"
            )));
        }
    }
    Ok(())
}

fn validate_grids(rod: &RodSpec, x_grid: &[f64], t_grid: &[f64]) -> Result<()> {
    if x_grid.is_empty() || t_grid.is_empty() {
        return Err(Error::Config("solution grids must be non-empty".into()));
    }
    if x_grid.iter().any(|&x| !(0.0..=rod.length).contains(&x)) {
        return Err(Error::Config("x grid must lie within [0, L]".into()));
    }
    if t_grid.iter().any(|&t| t < 0.0) {
        return Err(Error::Config("t grid must be non-negative".into()));
    }
    Ok(())
}

/// Fixed-free natural frequencies `(2r−1)·π·c/(2L)`, `r = 1..=count`.
fn fixed_free_frequencies(rod: &RodSpec, count: usize) -> Vec<f64> {
    let c = rod.wave_speed();
    (1..=count)
        .map(|r| (2 * r - 1) as f64 * std::f64::consts::PI * c / (2.0 * rod.length))
        .collect()
}

/// 4L-periodic triangle wave: identity on [-L, L], reflected on [L, 3L].
///
/// This is the odd-about-0, even-about-L extension of `x`, whose d'Alembert
/// combination sums the slowest-converging part of the fixed-free velocity
/// series in closed form.
fn triangle_wave(xi: f64, l: f64) -> f64 {
    let period = 4.0 * l;
    let m = xi - period * (xi / period).floor();
    if m <= l {
        m
    } else if m <= 3.0 * l {
        2.0 * l - m
    } else {
        m - period
    }
}

/// Antiderivative of [`triangle_wave`] with `G(0) = 0`; even and 4L-periodic,
/// which the reduction exploits so `G(ξ) - G(-ξ)` vanishes exactly.
fn triangle_integral(xi: f64, l: f64) -> f64 {
    let period = 4.0 * l;
    let r = xi.abs();
    let m = r - period * (r / period).floor();
    if m <= l {
        0.5 * m * m
    } else if m <= 3.0 * l {
        2.0 * l * m - 0.5 * m * m - l * l
    } else {
        0.5 * m * m - 4.0 * l * m + 8.0 * l * l
    }
}

/// Transient response of a fixed-free rod to a harmonic end load, from rest.
///
/// Modal superposition over `r_max` modes with the steady-state profile summed
/// exactly. The slowest modal tails are also summed in closed form — the
/// displacement's `1/ω_r³` tail via the triangle-wave antiderivative and the
/// velocity's `1/ω_r²` tail via the triangle wave itself — leaving `1/ω_r⁵`-
/// and `1/ω_r⁴`-class truncation respectively, so doubling `r_max` moves
/// either field by well under 1e-6 of its scale.
pub fn rod_case1_response(
    rod: &RodSpec,
    load: &HarmonicLoad,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<FieldHistory> {
    if rod.bc != RodBc::FixedFree || load.kind != LoadKind::BoundaryPoint {
        return Err(Error::Config(
            "end-load response requires a fixed-free rod with a boundary point load".into(),
        ));
    }
    validate_grids(rod, x_grid, t_grid)?;
    let naturals = fixed_free_frequencies(rod, rod.r_max);
    check_resonance(load.omega0, naturals.iter().copied())?;

    let (c, ea) = (rod.wave_speed(), rod.axial_rigidity());
    let (l, f0, w0) = (rod.length, load.amplitude, load.omega0);
    let rho_al = rod.mass_per_length() * l;
    let (n_x, n_t) = (x_grid.len(), t_grid.len());

    // Steady-state profile X(x): EA X'' + ρA ω₀² X = 0, X(0)=0, EA X'(L)=f₀.
    let x_coef = f0 * c / (ea * w0 * (w0 * l / c).cos());
    let steady: Vec<f64> = x_grid.iter().map(|&x| x_coef * (w0 * x / c).sin()).collect();

    // Per-mode spatial table and time-independent coefficients.
    let mut shapes = vec![0.0; naturals.len() * n_x];
    let mut coef_u = vec![0.0; naturals.len()];
    let mut coef_v = vec![0.0; naturals.len()];
    for (r, &wr) in naturals.iter().enumerate() {
        let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
        for (j, &x) in x_grid.iter().enumerate() {
            shapes[r * n_x + j] = (wr * x / c).sin();
        }
        coef_u[r] = -2.0 * f0 * w0.powi(3) / rho_al * sign / (wr.powi(3) * (wr * wr - w0 * w0));
        coef_v[r] = -2.0 * f0 * w0.powi(3) / rho_al * sign / (wr * wr * (wr * wr - w0 * w0));
    }

    let mut u = Tensor::zeros(&[n_t, n_x]);
    let mut v = Tensor::zeros(&[n_t, n_x]);
    for (i, &t) in t_grid.iter().enumerate() {
        if t == 0.0 {
            // From rest: the initial row is exact, not a truncated series.
            continue;
        }
        let (sin_w0t, cos_w0t) = ((w0 * t).sin(), (w0 * t).cos());
        for (j, &x) in x_grid.iter().enumerate() {
            let mut uj = steady[j] * sin_w0t
                - f0 * w0 * (triangle_integral(x + c * t, l) - triangle_integral(x - c * t, l))
                    / (2.0 * c * ea);
            let mut vj = w0 * steady[j] * cos_w0t
                - f0 * w0 * (triangle_wave(x - c * t, l) + triangle_wave(x + c * t, l))
                    / (2.0 * ea);
            for (r, &wr) in naturals.iter().enumerate() {
                let s = shapes[r * n_x + j];
                uj += coef_u[r] * s * (wr * t).sin();
                vj += coef_v[r] * s * (wr * t).cos();
            }
            u.set2(i, j, uj);
            v.set2(i, j, vj);
        }
    }
    FieldHistory::new(x_grid.to_vec(), t_grid.to_vec(), u, v)
}

/// Plain truncated modal series for the fixed-free end-load problem.
///
/// Reference implementation without steady-state extraction; converges like
/// `1/r²` (displacement) and `1/r` (velocity), so it needs a much larger
/// `r_max` than [`rod_case1_response`] for the same accuracy. Kept as an
/// independent cross-check.
pub fn rod_case1_series_reference(
    rod: &RodSpec,
    load: &HarmonicLoad,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<FieldHistory> {
    if rod.bc != RodBc::FixedFree || load.kind != LoadKind::BoundaryPoint {
        return Err(Error::Config(
            "end-load response requires a fixed-free rod with a boundary point load".into(),
        ));
    }
    validate_grids(rod, x_grid, t_grid)?;
    let naturals = fixed_free_frequencies(rod, rod.r_max);
    check_resonance(load.omega0, naturals.iter().copied())?;

    let c = rod.wave_speed();
    let (f0, w0) = (load.amplitude, load.omega0);
    let scale = (2.0 / (rod.mass_per_length() * rod.length)).sqrt();
    let (n_x, n_t) = (x_grid.len(), t_grid.len());

    let mut u = Tensor::zeros(&[n_t, n_x]);
    let mut v = Tensor::zeros(&[n_t, n_x]);
    for (i, &t) in t_grid.iter().enumerate() {
        for (j, &x) in x_grid.iter().enumerate() {
            let (mut uj, mut vj) = (0.0, 0.0);
            for (r, &wr) in naturals.iter().enumerate() {
                let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                let shape = scale * (wr * x / c).sin();
                let denom = w0 * w0 - wr * wr;
                let eta = sign * f0 / wr * scale * (w0 * (wr * t).sin() - wr * (w0 * t).sin())
                    / denom;
                let eta_dot = sign * f0 * scale * w0 * ((wr * t).cos() - (w0 * t).cos()) / denom;
                uj += shape * eta;
                vj += shape * eta_dot;
            }
            u.set2(i, j, uj);
            v.set2(i, j, vj);
        }
    }
    FieldHistory::new(x_grid.to_vec(), t_grid.to_vec(), u, v)
}

/// Characteristic function for spring-spring axial modes, `h(k)` with simple
/// sign changes at the wavenumber roots and no poles:
/// `h(k) = sin(kL)(k² − ab)/k − (a+b)cos(kL)` where `a = k1/EA`, `b = k2/EA`.
fn spring_char(k: f64, l: f64, a: f64, b: f64) -> f64 {
    (k * l).sin() * (k * k - a * b) / k - (a + b) * (k * l).cos()
}

/// Modal basis of a spring-spring rod: wavenumbers, frequencies, and load
/// projection coefficients, precomputed once and shared across responses.
#[derive(Debug, Clone)]
pub struct SpringModalBasis {
    rod: RodSpec,
    /// End-condition slope `k1/EA` entering the mode shape.
    slope: f64,
    wavenumbers: Vec<f64>,
    frequencies: Vec<f64>,
    /// Reciprocal L² norms `1/‖U_i‖`.
    inv_norms: Vec<f64>,
    /// Uniform-load projections `B_i = ∫U_i / ‖U_i‖`.
    projections: Vec<f64>,
}

impl SpringModalBasis {
    /// Find the first `count` modes. Roots are bracketed by a fine scan of the
    /// characteristic function and refined by bisection to relative 1e-12;
    /// norm and projection integrals use adaptive quadrature at relative 1e-10.
    pub fn new(rod: &RodSpec, count: usize) -> Result<Self> {
        let RodBc::SpringSpring { k1, k2 } = rod.bc else {
            return Err(Error::Config(
                "spring modal basis requires spring-spring boundary conditions".into(),
            ));
        };
        if count == 0 {
            return Err(Error::Config("mode count must be at least 1".into()));
        }
        let ea = rod.axial_rigidity();
        let (l, c) = (rod.length, rod.wave_speed());
        let (a, b) = (k1 / ea, k2 / ea);

        let step = std::f64::consts::PI / (16.0 * l);
        let k_max = (count + 2) as f64 * 2.0 * std::f64::consts::PI / l;
        let mut wavenumbers = Vec::with_capacity(count);
        let mut k_prev = 1e-9 / l;
        let mut h_prev = spring_char(k_prev, l, a, b);
        while wavenumbers.len() < count {
            let k = k_prev + step;
            if k > k_max {
                return Err(Error::Numeric(format!(
                    "found only {} of {count} modes scanning k ∈ (0, {k_max:.3}] at step {step:.3e}",
                    wavenumbers.len()
                )));
            }
            let h = spring_char(k, l, a, b);
            if h == 0.0 {
                wavenumbers.push(k);
            } else if h_prev * h < 0.0 {
                let (mut lo, mut hi) = (k_prev, k);
                let mut h_lo = h_prev;
                while hi - lo > 1e-13 * hi {
                    let mid = 0.5 * (lo + hi);
                    let h_mid = spring_char(mid, l, a, b);
                    if h_lo * h_mid <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        h_lo = h_mid;
                    }
                }
                wavenumbers.push(0.5 * (lo + hi));
            }
            k_prev = k;
            h_prev = h;
        }

        let mut inv_norms = Vec::with_capacity(count);
        let mut projections = Vec::with_capacity(count);
        for &k in &wavenumbers {
            let shape = move |x: f64| (k * x).cos() + a / k * (k * x).sin();
            let norm_sq = adaptive_simpson(move |x| shape(x) * shape(x), 0.0, l, 1e-10)?;
            let integral = adaptive_simpson(shape, 0.0, l, 1e-10)?;
            let inv = 1.0 / norm_sq.sqrt();
            inv_norms.push(inv);
            projections.push(integral * inv);
        }
        let frequencies = wavenumbers.iter().map(|&k| k * c).collect();
        Ok(Self { rod: *rod, slope: a, wavenumbers, frequencies, inv_norms, projections })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Uniform-load modal projections `B_i`.
    pub fn projections(&self) -> &[f64] {
        &self.projections
    }

    /// Unit-L²-norm mode shape value `Û_i(x)`.
    pub fn mode_shape(&self, i: usize, x: f64) -> f64 {
        let k = self.wavenumbers[i];
        ((k * x).cos() + self.slope / k * (k * x).sin()) * self.inv_norms[i]
    }

    /// Transient response to a uniform distributed harmonic load, from rest.
    pub fn response(
        &self,
        load: &HarmonicLoad,
        x_grid: &[f64],
        t_grid: &[f64],
    ) -> Result<FieldHistory> {
        if load.kind != LoadKind::UniformDistributed {
            return Err(Error::Config(
                "spring-spring response requires a uniform distributed load".into(),
            ));
        }
        validate_grids(&self.rod, x_grid, t_grid)?;
        check_resonance(load.omega0, self.frequencies.iter().copied())?;

        let rod = &self.rod;
        let (c, ea, rho_a) = (rod.wave_speed(), rod.axial_rigidity(), rod.mass_per_length());
        let (f0, w0, l) = (load.amplitude, load.omega0, rod.length);
        let (n_x, n_t) = (x_grid.len(), t_grid.len());

        // Steady state X(x) = C1 cos(k0 x) + C2 sin(k0 x) − f0/(ρA ω₀²) under
        // the spring end conditions.
        let k0 = w0 / c;
        let d = f0 / (rho_a * w0 * w0);
        let (s, co) = ((k0 * l).sin(), (k0 * l).cos());
        let g = ea * k0;
        let RodBc::SpringSpring { k1, k2 } = rod.bc else { unreachable!() };
        let (a11, a12, b1) = (-k1, g, -k1 * d);
        let (a21, a22, b2) = (k2 * co - g * s, g * co + k2 * s, k2 * d);
        let det = a11 * a22 - a12 * a21;
        if det.abs() < 1e-12 * (a11.abs() * a22.abs() + a12.abs() * a21.abs()).max(f64::MIN_POSITIVE)
        {
            return Err(Error::Numeric(format!(
                "steady-state system is singular at load frequency {w0}"
            )));
        }
        let c1 = (b1 * a22 - a12 * b2) / det;
        let c2 = (a11 * b2 - b1 * a21) / det;
        let steady: Vec<f64> =
            x_grid.iter().map(|&x| c1 * (k0 * x).cos() + c2 * (k0 * x).sin() - d).collect();

        let modes = self.wavenumbers.len();
        let mut shapes = vec![0.0; modes * n_x];
        let mut coef = vec![0.0; modes];
        for i in 0..modes {
            for (j, &x) in x_grid.iter().enumerate() {
                shapes[i * n_x + j] = self.mode_shape(i, x);
            }
            let wi = self.frequencies[i];
            coef[i] = f0 * self.projections[i] * w0 / (rho_a * (w0 * w0 - wi * wi));
        }

        let mut u = Tensor::zeros(&[n_t, n_x]);
        let mut v = Tensor::zeros(&[n_t, n_x]);
        for (row, &t) in t_grid.iter().enumerate() {
            if t == 0.0 {
                // From rest: the initial row is exact, not a truncated series.
                continue;
            }
            let (sin_w0t, cos_w0t) = ((w0 * t).sin(), (w0 * t).cos());
            for j in 0..n_x {
                let mut uj = steady[j] * sin_w0t;
                let mut vj = w0 * steady[j] * cos_w0t;
                for i in 0..modes {
                    let wi = self.frequencies[i];
                    let s = shapes[i * n_x + j];
                    uj += coef[i] * s * (wi * t).sin() / wi;
                    vj += coef[i] * s * (wi * t).cos();
                }
                u.set2(row, j, uj);
                v.set2(row, j, vj);
            }
        }
        FieldHistory::new(x_grid.to_vec(), t_grid.to_vec(), u, v)
    }
}

/// First `count` natural frequencies of a spring-spring rod.
pub fn rod_spring_frequencies(rod: &RodSpec, count: usize) -> Result<Vec<f64>> {
    Ok(SpringModalBasis::new(rod, count)?.frequencies().to_vec())
}

/// Transient response of a spring-spring rod to a uniform distributed
/// harmonic load, from rest, truncated at `rod.r_max` modes.
///
/// Convenience wrapper that rebuilds the modal basis; batch producers should
/// build one [`SpringModalBasis`] and call [`SpringModalBasis::response`].
pub fn rod_spring_distributed_response(
    rod: &RodSpec,
    load: &HarmonicLoad,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<FieldHistory> {
    SpringModalBasis::new(rod, rod.r_max)?.response(load, x_grid, t_grid)
}

/// Cut a `window`-step training sample out of a full solution history.
///
/// The static input is the state at row `t_start`; the dynamic input and the
/// target cover rows `t_start+1 ..= t_start+window`, with the load evaluated
/// at the history's absolute times (the window keeps the source phase).
/// `meta` records `[omega0, t[t_start]]`.
pub fn window_sample(
    full: &FieldHistory,
    load: &HarmonicLoad,
    t_start: usize,
    window: usize,
) -> Result<Sample> {
    if window == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    if t_start + window > full.n_rows() - 1 {
        return Err(Error::Config(format!(
            "window [{t_start}, {}] overruns a history with {} rows",
            t_start + window,
            full.n_rows()
        )));
    }
    let n_x = full.n_x();
    let mut in_static = Vec::with_capacity(2 * n_x);
    in_static.extend_from_slice(full.u.row(t_start));
    in_static.extend_from_slice(full.u_dot.row(t_start));

    let mut in_dyn = Tensor::zeros(&[window, 1]);
    let mut out = Tensor::zeros(&[window, 2 * n_x]);
    for i in 0..window {
        let row = t_start + 1 + i;
        in_dyn.set2(i, 0, load.value(full.t[row]));
        out.data_mut()[i * 2 * n_x..i * 2 * n_x + n_x].copy_from_slice(full.u.row(row));
        out.data_mut()[i * 2 * n_x + n_x..(i + 1) * 2 * n_x].copy_from_slice(full.u_dot.row(row));
    }
    Sample::new(in_static, in_dyn, out, vec![load.omega0, full.t[t_start]])
}
