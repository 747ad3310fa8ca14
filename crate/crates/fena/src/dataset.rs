//! Dataset machinery: seeded parameter draws (uniform or Latin-hypercube),
//! oracle-backed sample generation for every supported input/output contract,
//! window-based initial-condition augmentation, leakage-safe splitting, and a
//! checksummed on-disk format that round-trips bitwise.
//!
//! Every stored target comes from a solver in [`crate::analytic`] or
//! [`crate::fem`], never from a model. The intended workflow splits a set of
//! full from-rest source solutions *before* windowing, so windows cut from one
//! source can never land on both sides of the train/test boundary.

use crate::analytic::{
    rod_case1_response, window_sample, FieldHistory, HarmonicLoad, LoadKind, RodBc, RodSpec,
    SpringModalBasis,
};
use crate::error::{Error, Result};
use crate::fem::{beam_sample_fields, newmark_transient, BeamSpec, NewmarkConfig};
use crate::sample::Sample;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

/// On-disk format revision written by [`Dataset::save`].
pub const FORMAT_VERSION: u32 = 1;

/// Attempt budget when a load-frequency draw lands next to a natural
/// frequency and must be redrawn.
const MAX_REDRAWS: usize = 100;

/// Redraw margin, relative to the natural frequency. Strictly wider than the
/// solvers' own rejection band, so a draw that survives the redraw can never
/// be refused downstream.
const RESONANCE_MARGIN: f64 = 2e-6;

/// Input/output contract of a dataset's samples.
///
/// The numbered ids are stable names for the benchmark configurations; what
/// each one holds is spelled out on the variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseId {
    /// Fixed-free rod under a harmonic end load, from rest. Static input is
    /// the single placeholder `[0.0]`; output is displacement only.
    #[serde(rename = "case1")]
    Case1,
    /// Fixed-free rod under an end load, restartable from an arbitrary state:
    /// static input `{u₀, u̇₀}`, output `{u, u̇}`.
    #[serde(rename = "case2")]
    Case2,
    /// Spring-supported rod under a uniform distributed load, restartable:
    /// static input `{u₀, u̇₀}`, output `{u, u̇}`.
    #[serde(rename = "case3")]
    Case3,
    /// Inhomogeneous pinned-pinned beam under a uniform distributed load,
    /// from rest: static input is the property channels `{E(x), R(x)}`,
    /// output `{v, v̇}`.
    #[serde(rename = "case4")]
    Case4,
    /// Beam restartable from an arbitrary state: static input
    /// `{E, R, v₀, v̇₀}`, output `{v, v̇}`.
    #[serde(rename = "case5")]
    Case5,
    /// Spring-supported rod queried at a single location: static input
    /// `{u₀, u̇₀, x₀}`, output the 2-vector `{u(x₀), u̇(x₀)}` per step.
    #[serde(rename = "on-demand")]
    OnDemand,
}

impl CaseId {
    pub fn label(self) -> &'static str {
        match self {
            CaseId::Case1 => "case1",
            CaseId::Case2 => "case2",
            CaseId::Case3 => "case3",
            CaseId::Case4 => "case4",
            CaseId::Case5 => "case5",
            CaseId::OnDemand => "on-demand",
        }
    }

    pub fn is_beam(self) -> bool {
        matches!(self, CaseId::Case4 | CaseId::Case5)
    }

    /// Flat static-input width for a source grid of `n_x` nodes.
    pub fn static_width(self, n_x: usize) -> usize {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 | CaseId::Case3 | CaseId::Case4 => 2 * n_x,
            CaseId::Case5 => 4 * n_x,
            CaseId::OnDemand => 2 * n_x + 1,
        }
    }

    /// Output row width for a source grid of `n_x` nodes.
    pub fn out_width(self, n_x: usize) -> usize {
        match self {
            CaseId::Case1 => n_x,
            CaseId::OnDemand => 2,
            _ => 2 * n_x,
        }
    }

    /// Per-sample bookkeeping width; see [`meta_labels`](Self::meta_labels).
    pub fn meta_width(self) -> usize {
        self.meta_labels().len()
    }

    /// Names of the sample `meta` entries, in storage order.
    pub fn meta_labels(self) -> &'static [&'static str] {
        match self {
            CaseId::Case1 | CaseId::Case2 | CaseId::Case3 => &["omega0", "t_start"],
            CaseId::Case4 | CaseId::Case5 => &["omega0", "t_start", "omega_e", "omega_r"],
            CaseId::OnDemand => &["omega0", "t_start", "x0"],
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Space/time discretization of the stored solutions: `n_x` nodes, `n_t`
/// output steps of length `dt` seconds. The step at `t = 0` is implied (it is
/// the initial state), so a sample's rows cover `dt ..= n_t·dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_x: usize,
    pub n_t: usize,
    pub dt: f64,
}

impl GridMeta {
    fn validate(&self) -> Result<()> {
        if self.n_x < 2 {
            return Err(Error::Config(format!("grid needs at least 2 nodes, got {}", self.n_x)));
        }
        if self.n_t == 0 {
            return Err(Error::Config("grid needs at least 1 time step".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("grid step must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Uniform axially vibrating rod family: fixed geometry and material, with
/// the load frequency drawn per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RodProblem {
    pub length: f64,
    pub area: f64,
    pub youngs_modulus: f64,
    pub density: f64,
    pub bc: RodBc,
    pub load_kind: LoadKind,
    pub load_amplitude: f64,
    /// Modal truncation order of the solver.
    pub r_max: usize,
    pub grid: GridMeta,
}

impl RodProblem {
    pub fn rod_spec(&self) -> Result<RodSpec> {
        RodSpec::new(self.length, self.area, self.youngs_modulus, self.density, self.bc, self.r_max)
    }
}

/// Pinned-pinned beam family with harmonically modulated stiffness and
/// radius profiles; the modulation frequencies and the load frequency are
/// drawn per sample. `E(x) = e_base·(1 + 0.3·cos⁴(ω_E x))` and
/// `R(x) = r_base·(1 + sin⁴(ω_r x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamProblem {
    pub length: f64,
    pub density: f64,
    pub poisson_ratio: f64,
    pub e_base: f64,
    pub r_base: f64,
    pub alpha_d: f64,
    pub beta_d: f64,
    pub n_elem: usize,
    /// Internal march step of the time integrator; must divide `grid.dt`.
    pub dt_internal: f64,
    pub load_amplitude: f64,
    pub grid: GridMeta,
}

impl BeamProblem {
    pub fn beam_spec(&self, omega_e: f64, omega_r: f64) -> Result<BeamSpec> {
        let (e_field, r_field) = beam_sample_fields(self.e_base, omega_e, self.r_base, omega_r);
        Ok(BeamSpec::new(self.length, self.density, e_field, r_field, self.n_elem)?
            .with_poisson(self.poisson_ratio)
            .with_damping(self.alpha_d, self.beta_d))
    }

    pub fn newmark_config(&self) -> Result<NewmarkConfig> {
        let stride = (self.grid.dt / self.dt_internal).round();
        if !(stride >= 1.0) || (stride * self.dt_internal - self.grid.dt).abs() > 1e-9 * self.grid.dt
        {
            return Err(Error::Config(format!(
                "internal step {} does not divide the output step {}",
                self.dt_internal, self.grid.dt
            )));
        }
        Ok(NewmarkConfig { dt_internal: self.dt_internal, output_stride: stride as usize, ..NewmarkConfig::default() })
    }
}

/// Physical description of a sample family: geometry, material, boundary
/// conditions, load form, and the solution grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProblemSpec {
    Rod(RodProblem),
    Beam(BeamProblem),
}

impl ProblemSpec {
    /// Fixed-free benchmark rod (L = 1 m, A = 10⁻⁴ m², E = 10⁷ Pa,
    /// ρ = 9000 kg/m³) under a unit harmonic end load.
    pub fn rod_end_load(n_x: usize, n_t: usize, r_max: usize) -> ProblemSpec {
        ProblemSpec::Rod(RodProblem {
            length: 1.0,
            area: 1e-4,
            youngs_modulus: 1e7,
            density: 9000.0,
            bc: RodBc::FixedFree,
            load_kind: LoadKind::BoundaryPoint,
            load_amplitude: 1.0,
            r_max,
            grid: GridMeta { n_x, n_t, dt: 1e-3 },
        })
    }

    /// The same rod grounded through end springs (k₁ = EA/2L, k₂ = 2EA/L)
    /// under a unit uniform distributed load.
    pub fn rod_spring_load(n_x: usize, n_t: usize, r_max: usize) -> ProblemSpec {
        ProblemSpec::Rod(RodProblem {
            length: 1.0,
            area: 1e-4,
            youngs_modulus: 1e7,
            density: 9000.0,
            bc: RodBc::SpringSpring { k1: 500.0, k2: 2000.0 },
            load_kind: LoadKind::UniformDistributed,
            load_amplitude: 1.0,
            r_max,
            grid: GridMeta { n_x, n_t, dt: 1e-3 },
        })
    }

    /// Benchmark beam (L = 0.5 m, ρ = 2000 kg/m³, ν = 0.3, E₀ = 10⁷ Pa,
    /// R₀ = 0.01 m, Rayleigh damping α = 1.13, β = 1.31×10⁻⁵) under a unit
    /// uniform distributed harmonic load.
    pub fn beam_distributed(n_x: usize, n_t: usize, n_elem: usize) -> ProblemSpec {
        ProblemSpec::Beam(BeamProblem {
            length: 0.5,
            density: 2000.0,
            poisson_ratio: 0.3,
            e_base: 1e7,
            r_base: 0.01,
            alpha_d: 1.13,
            beta_d: 1.31e-5,
            n_elem,
            dt_internal: 1e-4,
            load_amplitude: 1.0,
            grid: GridMeta { n_x, n_t, dt: 1e-3 },
        })
    }

    pub fn grid(&self) -> &GridMeta {
        match self {
            ProblemSpec::Rod(r) => &r.grid,
            ProblemSpec::Beam(b) => &b.grid,
        }
    }

    pub fn length(&self) -> f64 {
        match self {
            ProblemSpec::Rod(r) => r.length,
            ProblemSpec::Beam(b) => b.length,
        }
    }

    pub fn load_amplitude(&self) -> f64 {
        match self {
            ProblemSpec::Rod(r) => r.load_amplitude,
            ProblemSpec::Beam(b) => b.load_amplitude,
        }
    }

    pub fn load_kind(&self) -> LoadKind {
        match self {
            ProblemSpec::Rod(r) => r.load_kind,
            ProblemSpec::Beam(_) => LoadKind::UniformDistributed,
        }
    }

    fn oracle_name(&self) -> &'static str {
        match self {
            ProblemSpec::Rod(_) => "modal-superposition",
            ProblemSpec::Beam(_) => "fem-newmark",
        }
    }

    /// Evenly spaced solution nodes over `[0, L]`.
    pub fn x_grid(&self) -> Vec<f64> {
        let (l, n) = (self.length(), self.grid().n_x);
        (0..n).map(|j| l * j as f64 / (n - 1) as f64).collect()
    }

    /// Full source time grid `0, dt, …, n_t·dt` (the initial instant plus
    /// every output step).
    pub fn t_grid(&self) -> Vec<f64> {
        let g = self.grid();
        (0..=g.n_t).map(|i| i as f64 * g.dt).collect()
    }
}

/// How per-sample parameters are drawn from their ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrawMode {
    UniformRandom,
    /// Latin-hypercube: each dimension's range is cut into one stratum per
    /// sample, each stratum receives exactly one draw, and the stratum
    /// orderings are shuffled independently across dimensions.
    Lhs,
}

/// Closed parameter ranges for the per-sample draws. Rods draw only the load
/// frequency; beams additionally draw the two property-modulation
/// frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawRanges {
    pub omega0: (f64, f64),
    pub omega_e: Option<(f64, f64)>,
    pub omega_r: Option<(f64, f64)>,
}

impl DrawRanges {
    /// Benchmark rod loading band: ω₀ ∈ [52.5, 366.5] rad/s.
    pub fn rod() -> DrawRanges {
        DrawRanges { omega0: (52.5, 366.5), omega_e: None, omega_r: None }
    }

    /// Benchmark beam bands: ω₀ ∈ [6.28, 622.04] rad/s and modulation
    /// frequencies in [π/L, 10π/L].
    pub fn beam(length: f64) -> DrawRanges {
        let band = (std::f64::consts::PI / length, 10.0 * std::f64::consts::PI / length);
        DrawRanges { omega0: (6.28, 622.04), omega_e: Some(band), omega_r: Some(band) }
    }

    fn validate(&self) -> Result<()> {
        for (name, range) in [
            ("omega0", Some(self.omega0)),
            ("omega_e", self.omega_e),
            ("omega_r", self.omega_r),
        ] {
            if let Some((lo, hi)) = range {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || !(lo > 0.0) {
                    return Err(Error::Config(format!(
                        "{name} range [{lo}, {hi}] must be finite, positive, and increasing"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One sample's physical parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParameterDraw {
    pub omega0: f64,
    pub omega_e: Option<f64>,
    pub omega_r: Option<f64>,
}

impl fmt::Display for ParameterDraw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "omega0 = {}", self.omega0)?;
        if let Some(w) = self.omega_e {
            write!(f, ", omega_e = {w}")?;
        }
        if let Some(w) = self.omega_r {
            write!(f, ", omega_r = {w}")?;
        }
        Ok(())
    }
}

/// A draw plus the interval any resonance redraw must stay inside (the LHS
/// stratum, or the whole range under uniform sampling).
struct DrawSlot {
    draw: ParameterDraw,
    omega0_interval: (f64, f64),
}

/// One dimension's draws: `(value, interval)` per sample, in sample order.
fn draw_dim(range: (f64, f64), count: usize, mode: DrawMode, rng: &mut ChaCha8Rng) -> Vec<(f64, (f64, f64))> {
    let (lo, hi) = range;
    match mode {
        DrawMode::UniformRandom => {
            (0..count).map(|_| (rng.gen_range(lo..hi), (lo, hi))).collect()
        }
        DrawMode::Lhs => {
            let w = (hi - lo) / count as f64;
            let mut cells: Vec<(f64, (f64, f64))> = (0..count)
                .map(|i| {
                    let a = lo + w * i as f64;
                    let b = if i + 1 == count { hi } else { lo + w * (i + 1) as f64 };
                    (rng.gen_range(a..b), (a, b))
                })
                .collect();
            cells.shuffle(rng);
            cells
        }
    }
}

fn make_slots(ranges: &DrawRanges, count: usize, mode: DrawMode, rng: &mut ChaCha8Rng) -> Vec<DrawSlot> {
    let w0 = draw_dim(ranges.omega0, count, mode, rng);
    let we = ranges.omega_e.map(|r| draw_dim(r, count, mode, rng));
    let wr = ranges.omega_r.map(|r| draw_dim(r, count, mode, rng));
    (0..count)
        .map(|i| DrawSlot {
            draw: ParameterDraw {
                omega0: w0[i].0,
                omega_e: we.as_ref().map(|d| d[i].0),
                omega_r: wr.as_ref().map(|d| d[i].0),
            },
            omega0_interval: w0[i].1,
        })
        .collect()
}

/// Seeded parameter draws, one per sample.
pub fn draw_parameters(
    ranges: &DrawRanges,
    count: usize,
    mode: DrawMode,
    seed: u64,
) -> Result<Vec<ParameterDraw>> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(make_slots(ranges, count, mode, &mut rng).into_iter().map(|s| s.draw).collect())
}

/// Redraws `omega0` until it clears every retained natural frequency by
/// [`RESONANCE_MARGIN`], staying inside `interval`.
fn nonresonant_omega0(
    mut omega0: f64,
    interval: (f64, f64),
    naturals: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    for _ in 0..MAX_REDRAWS {
        if !naturals.iter().any(|&w| (omega0 - w).abs() < RESONANCE_MARGIN * w) {
            return Ok(omega0);
        }
        omega0 = rng.gen_range(interval.0..interval.1);
    }
    Err(Error::Numeric(format!(
        "no load frequency clear of resonance found in [{}, {}] after {} draws",
        interval.0, interval.1, MAX_REDRAWS
    )))
}

/// Tags solver failures with the sample index and draw that triggered them.
fn draw_context(err: Error, index: usize, draw: &ParameterDraw) -> Error {
    let tag = format!("sample {index} ({draw})");
    match err {
        Error::Config(m) => Error::Config(format!("{tag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{tag}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{tag}: {m}")),
        other => other,
    }
}

/// Where a dataset came from; free of seeds, so reruns with different seeds
/// share their lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Producing library and version.
    pub generator: String,
    /// Which ground-truth solver filled the outputs.
    pub oracle: String,
    /// Ordered trail of the operations that shaped the set.
    pub lineage: Vec<String>,
}

/// Everything needed to interpret (and regenerate) a dataset's samples.
///
/// `grid` describes the samples as stored: after window augmentation `n_t`
/// is the window length, while `problem.grid` keeps the source-solution
/// shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub case: CaseId,
    pub problem: ProblemSpec,
    pub n_samples: usize,
    pub grid: GridMeta,
    pub draw_mode: DrawMode,
    pub gen_seed: u64,
    pub augment_seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Expected per-sample tensor shapes implied by the case contract.
    fn shape(&self) -> ShapeMeta {
        ShapeMeta {
            steps: self.grid.n_t,
            static_width: self.case.static_width(self.grid.n_x),
            dyn_width: 1,
            out_width: self.case.out_width(self.grid.n_x),
            meta_width: self.case.meta_width(),
        }
    }
}

/// An in-memory dataset: the manifest plus its samples, in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn generator_tag() -> String {
    format!("fena {}", env!("CARGO_PKG_VERSION"))
}

fn validate_case_problem(case: CaseId, problem: &ProblemSpec) -> Result<()> {
    match (case, problem) {
        (CaseId::Case1 | CaseId::Case2, ProblemSpec::Rod(r))
            if r.bc == RodBc::FixedFree && r.load_kind == LoadKind::BoundaryPoint =>
        {
            Ok(())
        }
        (CaseId::Case3, ProblemSpec::Rod(r))
            if matches!(r.bc, RodBc::SpringSpring { .. })
                && r.load_kind == LoadKind::UniformDistributed =>
        {
            Ok(())
        }
        (CaseId::Case4, ProblemSpec::Beam(_)) => Ok(()),
        (CaseId::Case5, _) => Err(Error::Config(
            "restartable beam sets are produced by windowing a from-rest beam set, not generated directly".into(),
        )),
        (CaseId::OnDemand, _) => Err(Error::Config(
            "per-location sets are produced by exploding a two-channel rod set, not generated directly".into(),
        )),
        (case, _) => Err(Error::Config(format!(
            "{case} cannot be generated from this problem description"
        ))),
    }
}

fn validate_ranges_for(case: CaseId, ranges: &DrawRanges) -> Result<()> {
    ranges.validate()?;
    let beam_dims = ranges.omega_e.is_some() && ranges.omega_r.is_some();
    let rod_dims = ranges.omega_e.is_none() && ranges.omega_r.is_none();
    if case.is_beam() && !beam_dims {
        return Err(Error::Config("beam draws need omega_e and omega_r ranges".into()));
    }
    if !case.is_beam() && !rod_dims {
        return Err(Error::Config("rod draws have a single dimension; drop the omega_e/omega_r ranges".into()));
    }
    Ok(())
}

/// Natural frequencies used for the resonance-redraw check; identical to the
/// values the solvers compare against.
fn rod_naturals(problem: &RodProblem) -> Result<Vec<f64>> {
    let rod = problem.rod_spec()?;
    match problem.bc {
        RodBc::FixedFree => {
            let c = rod.wave_speed();
            Ok((1..=problem.r_max)
                .map(|r| (2 * r - 1) as f64 * std::f64::consts::PI * c / (2.0 * rod.length))
                .collect())
        }
        RodBc::SpringSpring { .. } => crate::analytic::rod_spring_frequencies(&rod, problem.r_max),
    }
}

/// Cuts the case-specific sample out of a freshly solved from-rest history.
fn assemble_source_sample(
    case: CaseId,
    problem: &ProblemSpec,
    hist: &FieldHistory,
    load: &HarmonicLoad,
    draw: &ParameterDraw,
) -> Result<Sample> {
    let n_t = hist.n_rows() - 1;
    let base = window_sample(hist, load, 0, n_t)?;
    match (case, problem) {
        (CaseId::Case1, _) => {
            let n_x = hist.n_x();
            let mut out = Tensor::zeros(&[n_t, n_x]);
            for i in 0..n_t {
                out.data_mut()[i * n_x..(i + 1) * n_x].copy_from_slice(&base.out.row(i)[..n_x]);
            }
            Sample::new(vec![0.0], base.in_dyn, out, base.meta)
        }
        (CaseId::Case2 | CaseId::Case3, _) => Ok(base),
        (CaseId::Case4, ProblemSpec::Beam(beam)) => {
            let (omega_e, omega_r) = match (draw.omega_e, draw.omega_r) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("beam sample without property draws".into())),
            };
            let (e_field, r_field) = beam_sample_fields(beam.e_base, omega_e, beam.r_base, omega_r);
            let mut in_static = e_field.sample(&hist.x);
            in_static.extend(r_field.sample(&hist.x));
            let mut meta = base.meta;
            meta.push(omega_e);
            meta.push(omega_r);
            Sample::new(in_static, base.in_dyn, base.out, meta)
        }
        _ => Err(Error::Config(format!("{case} is not a generatable source contract"))),
    }
}

/// Generates `count` from-rest samples for `case`, with each sample's
/// parameters drawn per `mode` and every target filled by the matching
/// ground-truth solver. Load frequencies landing within [`RESONANCE_MARGIN`]
/// of a retained natural frequency are redrawn (inside their stratum, so LHS
/// stratification survives).
pub fn generate(
    case: CaseId,
    problem: &ProblemSpec,
    ranges: &DrawRanges,
    count: usize,
    mode: DrawMode,
    seed: u64,
) -> Result<Dataset> {
    validate_case_problem(case, problem)?;
    validate_ranges_for(case, ranges)?;
    problem.grid().validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = make_slots(ranges, count, mode, &mut rng);
    if let ProblemSpec::Rod(rod) = problem {
        let naturals = rod_naturals(rod)?;
        for slot in &mut slots {
            slot.draw.omega0 =
                nonresonant_omega0(slot.draw.omega0, slot.omega0_interval, &naturals, &mut rng)?;
        }
    }

    let x_grid = problem.x_grid();
    let t_grid = problem.t_grid();
    let samples: Vec<Sample> = match problem {
        ProblemSpec::Rod(rod) => {
            let spec = rod.rod_spec()?;
            let basis = match rod.bc {
                RodBc::SpringSpring { .. } => Some(SpringModalBasis::new(&spec, rod.r_max)?),
                RodBc::FixedFree => None,
            };
            slots
                .par_iter()
                .enumerate()
                .map(|(i, slot)| {
                    let load =
                        HarmonicLoad::new(rod.load_amplitude, slot.draw.omega0, rod.load_kind)?;
                    let hist = match &basis {
                        Some(b) => b.response(&load, &x_grid, &t_grid),
                        None => rod_case1_response(&spec, &load, &x_grid, &t_grid),
                    }
                    .map_err(|e| draw_context(e, i, &slot.draw))?;
                    assemble_source_sample(case, problem, &hist, &load, &slot.draw)
                })
                .collect::<Result<_>>()?
        }
        ProblemSpec::Beam(beam) => {
            let cfg = beam.newmark_config()?;
            let rest = vec![0.0; beam.grid.n_x];
            slots
                .par_iter()
                .enumerate()
                .map(|(i, slot)| {
                    let load = HarmonicLoad::new(
                        beam.load_amplitude,
                        slot.draw.omega0,
                        LoadKind::UniformDistributed,
                    )?;
                    let (omega_e, omega_r) = (
                        slot.draw.omega_e.expect("validated beam ranges"),
                        slot.draw.omega_r.expect("validated beam ranges"),
                    );
                    let spec = beam.beam_spec(omega_e, omega_r)?;
                    let hist =
                        newmark_transient(&spec, &cfg, &load, &x_grid, &t_grid, &rest, &rest)
                            .map_err(|e| draw_context(e, i, &slot.draw))?;
                    assemble_source_sample(case, problem, &hist, &load, &slot.draw)
                })
                .collect::<Result<_>>()?
        }
    };

    Ok(Dataset {
        manifest: DatasetManifest {
            case,
            problem: problem.clone(),
            n_samples: samples.len(),
            grid: *problem.grid(),
            draw_mode: mode,
            gen_seed: seed,
            augment_seed: None,
            split_seed: None,
            provenance: Provenance {
                generator: generator_tag(),
                oracle: problem.oracle_name().into(),
                lineage: vec!["generated".into()],
            },
        },
        samples,
    })
}

/// Window extraction plan for initial-condition augmentation. `t_start` is
/// the inclusive range of admissible window-start rows, in steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub windows_per_source: usize,
    pub window: usize,
    pub t_start: (usize, usize),
}

impl AugmentPlan {
    /// One 100-step window per 500-step rod source, started anywhere in the
    /// first 400 steps.
    pub fn rod_standard() -> AugmentPlan {
        AugmentPlan { windows_per_source: 1, window: 100, t_start: (0, 400) }
    }

    /// One 100-step window per 400-step beam source, started strictly inside
    /// the first 300 steps.
    pub fn beam_standard() -> AugmentPlan {
        AugmentPlan { windows_per_source: 1, window: 100, t_start: (1, 299) }
    }

    fn validate(&self, source_steps: usize) -> Result<()> {
        if self.window == 0 || self.windows_per_source == 0 {
            return Err(Error::Config("augmentation needs a positive window and count".into()));
        }
        if self.t_start.0 > self.t_start.1 {
            return Err(Error::Config(format!(
                "empty start range [{}, {}]",
                self.t_start.0, self.t_start.1
            )));
        }
        if self.t_start.1 + self.window > source_steps {
            return Err(Error::Config(format!(
                "window [{}, {}] overruns a {}-step source",
                self.t_start.1,
                self.t_start.1 + self.window,
                source_steps
            )));
        }
        Ok(())
    }
}

/// Rebuilds the full from-rest solution history (and its load) that a source
/// sample was cut from. Row 0 is the rest state; row `i ≥ 1` is output row
/// `i − 1`.
fn source_history(problem: &ProblemSpec, sample: &Sample) -> Result<(FieldHistory, HarmonicLoad)> {
    let grid = problem.grid();
    let (n_x, steps) = (grid.n_x, sample.steps());
    if sample.out.shape() != [steps, 2 * n_x] {
        return Err(Error::ShapeMismatch {
            op: "source history",
            detail: format!(
                "need a [steps, 2·n_x] two-channel output, got {:?} with n_x = {n_x}",
                sample.out.shape()
            ),
        });
    }
    let mut u = Tensor::zeros(&[steps + 1, n_x]);
    let mut v = Tensor::zeros(&[steps + 1, n_x]);
    for i in 0..steps {
        let row = sample.out.row(i);
        u.data_mut()[(i + 1) * n_x..(i + 2) * n_x].copy_from_slice(&row[..n_x]);
        v.data_mut()[(i + 1) * n_x..(i + 2) * n_x].copy_from_slice(&row[n_x..]);
    }
    let t = (0..=steps).map(|i| i as f64 * grid.dt).collect();
    let load = HarmonicLoad::new(problem.load_amplitude(), sample.meta[0], problem.load_kind())?;
    Ok((FieldHistory::new(problem.x_grid(), t, u, v)?, load))
}

/// Re-anchors full from-rest sources at seeded random interior instants,
/// producing samples whose static input carries a nonzero initial state. A
/// two-channel rod set stays in its contract; a from-rest beam set becomes a
/// restartable one. Window loads keep the source's absolute phase.
pub fn augment_nonzero_ic(source: &Dataset, plan: &AugmentPlan, seed: u64) -> Result<Dataset> {
    let target = match source.manifest.case {
        CaseId::Case2 => CaseId::Case2,
        CaseId::Case3 => CaseId::Case3,
        CaseId::Case4 => CaseId::Case5,
        CaseId::Case1 => {
            return Err(Error::Config(
                "displacement-only samples carry no velocity to restart from; generate a two-channel source instead".into(),
            ))
        }
        CaseId::Case5 | CaseId::OnDemand => {
            return Err(Error::Config("source samples are already windowed".into()))
        }
    };
    let grid = source.manifest.problem.grid();
    plan.validate(grid.n_t)?;
    for (i, s) in source.samples.iter().enumerate() {
        if s.steps() != grid.n_t || s.meta.get(1).copied() != Some(0.0) {
            return Err(Error::Config(format!(
                "window augmentation needs full-length from-rest sources; sample {i} covers {} steps starting at t = {:?}",
                s.steps(),
                s.meta.get(1)
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = plan.windows_per_source;
    let jobs: Vec<(usize, usize)> = (0..source.samples.len())
        .flat_map(|i| (0..per).map(move |_| i))
        .map(|i| (i, rng.gen_range(plan.t_start.0..=plan.t_start.1)))
        .collect();

    let samples: Vec<Sample> = jobs
        .par_iter()
        .map(|&(i, t_start)| {
            let src = &source.samples[i];
            let (hist, load) = source_history(&source.manifest.problem, src)?;
            let base = window_sample(&hist, &load, t_start, plan.window)?;
            match target {
                CaseId::Case5 => {
                    // Keep the property channels ahead of the windowed state,
                    // and the property draws behind the window bookkeeping.
                    let mut in_static = src.in_static.clone();
                    in_static.extend_from_slice(&base.in_static);
                    let mut meta = base.meta;
                    meta.extend_from_slice(&src.meta[2..]);
                    Sample::new(in_static, base.in_dyn, base.out, meta)
                }
                _ => Ok(base),
            }
        })
        .collect::<Result<_>>()?;

    let mut manifest = source.manifest.clone();
    manifest.case = target;
    manifest.n_samples = samples.len();
    manifest.grid.n_t = plan.window;
    manifest.augment_seed = Some(seed);
    manifest
        .provenance
        .lineage
        .push(format!("windowed(w={}, per={})", plan.window, per));
    Ok(Dataset { manifest, samples })
}

/// Explodes every grid sample of a two-channel rod set into `n_x`
/// per-location samples: the query location becomes an extra static channel
/// and the output narrows to that location's `{u, u̇}` pair.
pub fn explode_per_location(source: &Dataset) -> Result<Dataset> {
    if !matches!(source.manifest.case, CaseId::Case2 | CaseId::Case3) {
        return Err(Error::Config(
            "per-location explosion needs rod samples with displacement and velocity channels".into(),
        ));
    }
    let n_x = source.manifest.grid.n_x;
    let xs = source.manifest.problem.x_grid();
    let mut samples = Vec::with_capacity(source.samples.len() * n_x);
    for src in &source.samples {
        let steps = src.steps();
        for (j, &xj) in xs.iter().enumerate() {
            let mut in_static = src.in_static.clone();
            in_static.push(xj);
            let mut out = Tensor::zeros(&[steps, 2]);
            for i in 0..steps {
                let row = src.out.row(i);
                out.set2(i, 0, row[j]);
                out.set2(i, 1, row[n_x + j]);
            }
            let meta = vec![src.meta[0], src.meta[1], xj];
            samples.push(Sample::new(in_static, src.in_dyn.clone(), out, meta)?);
        }
    }
    let mut manifest = source.manifest.clone();
    manifest.case = CaseId::OnDemand;
    manifest.n_samples = samples.len();
    manifest.provenance.lineage.push(format!("per-location(n_x={n_x})"));
    Ok(Dataset { manifest, samples })
}

/// Number of samples the train side of a `fraction` split receives.
fn train_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

impl Dataset {
    /// Seeded shuffle split into disjoint, exhaustive train/test subsets.
    /// Apply this to *source* sets before augmentation so windows from one
    /// source never straddle the boundary.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction must lie strictly between 0 and 1, got {fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = train_count(self.samples.len(), fraction);

        let take = |ids: &[usize], role: &str| -> Dataset {
            let samples: Vec<Sample> = ids.iter().map(|&i| self.samples[i].clone()).collect();
            let mut manifest = self.manifest.clone();
            manifest.n_samples = samples.len();
            manifest.split_seed = Some(seed);
            manifest.provenance.lineage.push(format!("split({role}, {fraction})"));
            Dataset { manifest, samples }
        };
        Ok((take(&idx[..n_train], "train"), take(&idx[n_train..], "test")))
    }

    /// Validates that every sample matches the manifest's case contract and
    /// returns the common shapes.
    fn shape(&self) -> Result<ShapeMeta> {
        let want = self.manifest.shape();
        if self.manifest.n_samples != self.samples.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!(
                    "manifest declares {} samples, found {}",
                    self.manifest.n_samples,
                    self.samples.len()
                ),
            });
        }
        for (i, s) in self.samples.iter().enumerate() {
            let ok = s.in_static.len() == want.static_width
                && s.in_dyn.shape() == [want.steps, want.dyn_width]
                && s.out.shape() == [want.steps, want.out_width]
                && s.meta.len() == want.meta_width;
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    detail: format!(
                        "sample {i} does not follow the {} contract (static {}, dyn {:?}, out {:?}, meta {})",
                        self.manifest.case,
                        s.in_static.len(),
                        s.in_dyn.shape(),
                        s.out.shape(),
                        s.meta.len()
                    ),
                });
            }
        }
        Ok(want)
    }
}

/// Per-sample tensor shapes, spelled out in the on-disk manifest so blob
/// length checks need no case knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct ShapeMeta {
    steps: usize,
    static_width: usize,
    dyn_width: usize,
    out_width: usize,
    meta_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    elements: u64,
    fnv64: String,
}

#[derive(Serialize, Deserialize)]
struct DiskManifest {
    format_version: u32,
    dataset: DatasetManifest,
    shape: ShapeMeta,
    blobs: Vec<BlobMeta>,
}

/// Blob order on disk: per-sample blocks, row-major within each sample.
const BLOB_NAMES: [&str; 4] = ["in_static", "in_dyn", "out", "meta"];

/// FNV-1a over the raw blob bytes.
pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn le_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

impl Dataset {
    /// Writes `manifest.json` plus one little-endian float64 blob per field
    /// (`in_static.f64`, `in_dyn.f64`, `out.f64`, `meta.f64`) into `dir`.
    /// Blob checksums land in the manifest; the round trip through [`load`]
    /// is bitwise lossless.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let shape = self.shape()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let blobs: [Vec<u8>; 4] = [
            le_bytes(self.samples.iter().flat_map(|s| s.in_static.iter().copied())),
            le_bytes(self.samples.iter().flat_map(|s| s.in_dyn.data().iter().copied())),
            le_bytes(self.samples.iter().flat_map(|s| s.out.data().iter().copied())),
            le_bytes(self.samples.iter().flat_map(|s| s.meta.iter().copied())),
        ];
        let mut metas = Vec::with_capacity(4);
        for (name, bytes) in BLOB_NAMES.iter().zip(&blobs) {
            let path = dir.join(format!("{name}.f64"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            metas.push(BlobMeta {
                name: (*name).into(),
                elements: (bytes.len() / 8) as u64,
                fnv64: format!("{:016x}", fnv64(bytes)),
            });
        }

        let manifest_path = dir.join("manifest.json");
        let disk = DiskManifest {
            format_version: FORMAT_VERSION,
            dataset: self.manifest.clone(),
            shape,
            blobs: metas,
        };
        let text = serde_json::to_string_pretty(&disk).map_err(|e| Error::Manifest {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
    }

    /// Writes `dynamics.csv` (one row per sample and step: absolute time,
    /// load value, output channels), `static.csv`, and `meta.csv` into `dir`
    /// for ad-hoc inspection.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let shape = self.shape()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.manifest;

        let open = |name: &str| -> Result<(std::path::PathBuf, BufWriter<fs::File>)> {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Ok((path, BufWriter::new(file)))
        };
        let finish = |path: &Path, res: std::io::Result<()>| -> Result<()> {
            res.map_err(|e| Error::io(path, e))
        };

        let (path, mut w) = open("dynamics.csv")?;
        finish(&path, (|| {
            writeln!(w, "# case: {}, oracle: {}", m.case, m.provenance.oracle)?;
            writeln!(w, "# samples: {}, steps: {}, dt: {}", m.n_samples, shape.steps, m.grid.dt)?;
            write!(w, "sample,step,time,load")?;
            for k in 0..shape.out_width {
                write!(w, ",out_{k}")?;
            }
            writeln!(w)?;
            for (i, s) in self.samples.iter().enumerate() {
                let t0 = s.meta[1];
                for row in 0..shape.steps {
                    let time = t0 + (row + 1) as f64 * m.grid.dt;
                    write!(w, "{i},{row},{time},{}", s.in_dyn.at2(row, 0))?;
                    for &v in s.out.row(row) {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w)?;
                }
            }
            w.flush()
        })())?;

        let (path, mut w) = open("static.csv")?;
        finish(&path, (|| {
            write!(w, "sample")?;
            for k in 0..shape.static_width {
                write!(w, ",s_{k}")?;
            }
            writeln!(w)?;
            for (i, s) in self.samples.iter().enumerate() {
                write!(w, "{i}")?;
                for v in &s.in_static {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })())?;

        let (path, mut w) = open("meta.csv")?;
        finish(&path, (|| {
            writeln!(w, "sample,{}", m.case.meta_labels().join(","))?;
            for (i, s) in self.samples.iter().enumerate() {
                write!(w, "{i}")?;
                for v in &s.meta {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })())
    }
}

/// Reads a dataset saved by [`Dataset::save`], verifying the format version,
/// every blob's length, and every blob's checksum before any decoding.
pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    let version = value.get("format_version").ok_or_else(|| Error::Manifest {
        path: manifest_path.clone(),
        detail: "missing format_version".into(),
    })?;
    if version.as_u64() != Some(FORMAT_VERSION as u64) {
        return Err(Error::FormatVersion {
            path: manifest_path,
            found: version.to_string(),
            expected: FORMAT_VERSION,
        });
    }
    let disk: DiskManifest = serde_json::from_value(value).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;

    let manifest = disk.dataset;
    if disk.shape != manifest.shape() {
        return Err(Error::Manifest {
            path: manifest_path,
            detail: format!(
                "shape block disagrees with the {} contract on a {}-node grid",
                manifest.case, manifest.grid.n_x
            ),
        });
    }
    let names: Vec<&str> = disk.blobs.iter().map(|b| b.name.as_str()).collect();
    if names != BLOB_NAMES {
        return Err(Error::Manifest {
            path: manifest_path,
            detail: format!("expected blobs {BLOB_NAMES:?}, manifest lists {names:?}"),
        });
    }
    let s = disk.shape;
    let n = manifest.n_samples as u64;
    let expected_elements = [
        n * s.static_width as u64,
        n * (s.steps * s.dyn_width) as u64,
        n * (s.steps * s.out_width) as u64,
        n * s.meta_width as u64,
    ];
    for (blob, &want) in disk.blobs.iter().zip(&expected_elements) {
        if blob.elements != want {
            return Err(Error::Manifest {
                path: manifest_path,
                detail: format!(
                    "blob `{}` declares {} elements, the shape block implies {}",
                    blob.name, blob.elements, want
                ),
            });
        }
    }

    let mut fields: Vec<Vec<f64>> = Vec::with_capacity(4);
    for blob in &disk.blobs {
        let path = dir.join(format!("{}.f64", blob.name));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = blob.elements * 8;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path,
                blob: blob.name.clone(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let declared = u64::from_str_radix(&blob.fnv64, 16).map_err(|_| Error::Manifest {
            path: manifest_path.clone(),
            detail: format!("blob `{}` has a malformed checksum `{}`", blob.name, blob.fnv64),
        })?;
        if fnv64(&bytes) != declared {
            return Err(Error::Checksum { path, blob: blob.name.clone() });
        }
        fields.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        );
    }

    let n = manifest.n_samples;
    let (sw, dw, ow, mw) = (s.static_width, s.steps * s.dyn_width, s.steps * s.out_width, s.meta_width);
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            Sample::new(
                fields[0][i * sw..(i + 1) * sw].to_vec(),
                Tensor::new(vec![s.steps, s.dyn_width], fields[1][i * dw..(i + 1) * dw].to_vec())?,
                Tensor::new(vec![s.steps, s.out_width], fields[2][i * ow..(i + 1) * ow].to_vec())?,
                fields[3][i * mw..(i + 1) * mw].to_vec(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, samples })
}
