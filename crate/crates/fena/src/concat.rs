//! Long-horizon simulation by window concatenation.
//!
//! A surrogate trained on fixed-length windows is calibrated once on held-out
//! windows — measure its per-step error profile, cut the window where that
//! error starts to grow — and then driven far past its training horizon by
//! stitching: predict a window, keep the trustworthy prefix, restart the next
//! window from the predicted end state, and advance the load phase in
//! absolute time. Segments run strictly in sequence; only the members of an
//! ensemble within one segment are independent.

use std::cell::RefCell;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Sample;
use crate::sfne::{annotate, relative_error_grouped, Ensemble, SfneModel};
use crate::tensor::Tensor;

/// Default relative-improvement threshold for [`select_ensemble_size`]:
/// adding a member must shave at least this fraction off the mean test error
/// to pay for itself.
pub const DEFAULT_IMPROVEMENT_THRESHOLD: f64 = 0.05;

/// Anything that can roll one window forward: a single surrogate, an
/// ensemble, or a reference solver standing in for either.
pub trait WindowPredictor {
    /// Steps produced per predicted window.
    fn window_len(&self) -> usize;

    /// Width of each output row ({field; rate} column halves for models whose
    /// windows can be stitched).
    fn output_width(&self) -> usize;

    /// Predict one window. `in_static` is the state at the window's start,
    /// `in_dyn` the per-step load column, and `row_times[r]` the absolute
    /// time of output row `r`. Learned predictors ignore `row_times` — the
    /// load column is their only view of time — while reference solvers may
    /// evaluate their closed form at exactly those times.
    fn predict_window(&self, in_static: &[f64], in_dyn: &Tensor, row_times: &[f64])
        -> Result<Tensor>;
}

impl WindowPredictor for SfneModel {
    fn window_len(&self) -> usize {
        self.arch().n_t
    }

    fn output_width(&self) -> usize {
        self.arch().output_width
    }

    fn predict_window(
        &self,
        in_static: &[f64],
        in_dyn: &Tensor,
        _row_times: &[f64],
    ) -> Result<Tensor> {
        self.forward(in_static, in_dyn)
    }
}

impl WindowPredictor for Ensemble {
    fn window_len(&self) -> usize {
        self.members[0].arch().n_t
    }

    fn output_width(&self) -> usize {
        self.members[0].arch().output_width
    }

    fn predict_window(
        &self,
        in_static: &[f64],
        in_dyn: &Tensor,
        _row_times: &[f64],
    ) -> Result<Tensor> {
        self.forward(in_static, in_dyn)
    }
}

/// Chosen ensemble size plus the error-versus-size curve behind the choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSelection {
    /// Smallest size whose successor fails the improvement threshold.
    pub k: usize,
    /// Mean test error of the running-mean ensemble at each size `1..=len`.
    pub error_by_size: Vec<f64>,
}

/// Pick how many candidate models are worth averaging: the smallest `k` such
/// that adding model `k + 1` improves the mean test error by less than
/// `improvement_threshold` (relative). A single candidate or a run of
/// identical candidates selects `k = 1`; if every addition keeps paying, all
/// candidates are kept.
pub fn select_ensemble_size(
    candidates: &[SfneModel],
    test: &[Sample],
    groups: usize,
    improvement_threshold: f64,
    batch_size: usize,
) -> Result<SizeSelection> {
    if candidates.is_empty() {
        return Err(Error::Config(
            "ensemble size selection needs at least one candidate model".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::Config(
            "ensemble size selection needs a non-empty test set".into(),
        ));
    }
    if !improvement_threshold.is_finite() || !(improvement_threshold >= 0.0) {
        return Err(Error::Config(format!(
            "improvement threshold must be finite and non-negative, got {improvement_threshold}"
        )));
    }
    for (i, m) in candidates.iter().enumerate().skip(1) {
        if m.arch() != candidates[0].arch() {
            return Err(Error::Config(format!(
                "candidate {i} disagrees with candidate 0 on the architecture"
            )));
        }
    }

    let mut sums: Vec<Tensor> = Vec::new();
    let mut error_by_size = Vec::with_capacity(candidates.len());
    for (k, model) in candidates.iter().enumerate() {
        let preds = model
            .predict_all(test, batch_size)
            .map_err(|e| annotate(e, &format!("candidate {k}")))?;
        if sums.is_empty() {
            sums = preds;
        } else {
            for (acc, p) in sums.iter_mut().zip(&preds) {
                for (a, &b) in acc.data_mut().iter_mut().zip(p.data()) {
                    *a += b;
                }
            }
        }
        let scale = 1.0 / (k + 1) as f64;
        let mut total = 0.0;
        for (acc, s) in sums.iter().zip(test) {
            let mean = acc.map(|v| v * scale);
            total += relative_error_grouped(&mean, &s.out, groups)?;
        }
        error_by_size.push(total / test.len() as f64);
    }

    let k = pick_k(&error_by_size, improvement_threshold);
    Ok(SizeSelection { k, error_by_size })
}

/// The decision rule of [`select_ensemble_size`], applied to a ready-made
/// error-versus-size curve.
fn pick_k(error_by_size: &[f64], threshold: f64) -> usize {
    for k in 1..error_by_size.len() {
        let before = error_by_size[k - 1];
        let after = error_by_size[k];
        // A zero-error curve cannot improve further; count that as "no gain".
        let improvement = if before > 0.0 { (before - after) / before } else { 0.0 };
        if improvement < threshold {
            return k;
        }
    }
    error_by_size.len()
}

/// Per-step mean relative error of an ensemble over a set of equal-length
/// test windows. Step `t`'s entry averages, over samples and column groups,
/// the step's mean absolute error normalized by that sample group's span over
/// the whole window — the same normalization the scalar metric uses, resolved
/// in time.
pub fn error_profile(
    ensemble: &Ensemble,
    test: &[Sample],
    groups: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Config(
            "per-step error profile needs a non-empty test set".into(),
        ));
    }
    if groups == 0 {
        return Err(Error::Config("need at least one column group".into()));
    }
    let steps = test[0].steps();
    for (i, s) in test.iter().enumerate() {
        if s.steps() != steps {
            return Err(Error::Config(format!(
                "per-step error profile needs equal-length windows; sample {i} has {} steps, sample 0 has {steps}",
                s.steps()
            )));
        }
    }

    let preds = ensemble.predict_all(test, batch_size)?;
    let mut profile = vec![0.0; steps];
    for (i, (pred, s)) in preds.iter().zip(test).enumerate() {
        let (rows, w) = s.out.dim2()?;
        if w % groups != 0 {
            return Err(Error::Config(format!(
                "{w} columns cannot be split into {groups} equal groups"
            )));
        }
        let gw = w / groups;
        for g in 0..groups {
            let cols = g * gw..(g + 1) * gw;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for t in 0..rows {
                for &v in &s.out.row(t)[cols.clone()] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let range = hi - lo;
            if !(range > 0.0) {
                return Err(Error::Numeric(format!(
                    "relative error undefined: column group {g} of sample {i} is constant"
                )));
            }
            for t in 0..rows {
                let pr = &pred.row(t)[cols.clone()];
                let tr = &s.out.row(t)[cols.clone()];
                let mean =
                    pr.iter().zip(tr).map(|(&p, &v)| (p - v).abs()).sum::<f64>() / gw as f64;
                profile[t] += 100.0 * mean / range;
            }
        }
    }
    let scale = 1.0 / (test.len() * groups) as f64;
    for e in &mut profile {
        *e *= scale;
    }
    Ok(profile)
}

/// A calibrated hand-off step: how many window steps to keep per segment,
/// plus a flag marking profiles with no detectable late-window error growth
/// (the rule then keeps everything but the final step).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoff {
    /// Steps kept per segment, `1 ..= profile.len() - 1`.
    pub step: usize,
    /// The whole window stayed within threshold; the cap below is arbitrary.
    pub flat: bool,
}

/// Pick the hand-off step from a per-step error profile: the largest step `t`
/// (1-based) whose error stays within 1.5× the median error over the middle
/// half of the window. The middle-half median ignores both the settling-in
/// steps and the late-window growth the rule is looking for. A profile whose
/// final step still passes carries no usable cut signal; the cut is then
/// capped one short of the window and flagged.
pub fn find_cutoff(profile: &[f64]) -> Result<Cutoff> {
    let n = profile.len();
    if n < 4 {
        return Err(Error::Config(format!(
            "cut-off calibration needs at least 4 profile steps, got {n}"
        )));
    }
    for (t, &e) in profile.iter().enumerate() {
        if !e.is_finite() || !(e >= 0.0) {
            return Err(Error::Numeric(format!(
                "error profile must be finite and non-negative; step {t} is {e}"
            )));
        }
    }

    let threshold = 1.5 * median(&profile[n / 4..3 * n / 4]);
    let last_ok = profile
        .iter()
        .rposition(|&e| e <= threshold)
        .ok_or_else(|| {
            Error::Numeric("no profile step falls under the cut-off threshold".into())
        })?;
    let step = last_ok + 1;
    if step >= n {
        Ok(Cutoff { step: n - 1, flat: true })
    } else {
        Ok(Cutoff { step, flat: false })
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Everything the stitcher needs, measured once on held-out windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatCalibration {
    /// Members in the calibrated ensemble.
    pub ensemble_size: usize,
    /// Per-step mean relative error over the test windows.
    pub error_profile: Vec<f64>,
    /// Hand-off step chosen by [`find_cutoff`].
    pub cutoff: usize,
    /// Set when the profile carried no usable cut signal.
    pub flat_profile: bool,
    /// Threshold used (or to be used) for sizing the ensemble.
    pub improvement_threshold: f64,
}

/// Measure an ensemble's per-step error profile on held-out windows and pick
/// the hand-off step.
pub fn calibrate(
    ensemble: &Ensemble,
    test: &[Sample],
    groups: usize,
    improvement_threshold: f64,
    batch_size: usize,
) -> Result<ConcatCalibration> {
    let error_profile = error_profile(ensemble, test, groups, batch_size)?;
    let cut = find_cutoff(&error_profile)?;
    Ok(ConcatCalibration {
        ensemble_size: ensemble.members.len(),
        error_profile,
        cutoff: cut.step,
        flat_profile: cut.flat,
        improvement_threshold,
    })
}

/// One stitched segment: `steps` rows starting at global step `start_step`
/// (1-based; step 0 is the initial state and is not emitted).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub start_step: usize,
    pub steps: usize,
    /// Filled by [`LongRunResult::score_against`] when a reference exists.
    pub relative_error: Option<f64>,
}

/// A stitched long-horizon trajectory.
#[derive(Clone, Debug)]
pub struct LongRunResult {
    /// `horizon × output_width` rows; row `k` is global step `k + 1`.
    pub history: Tensor,
    /// Absolute time of each history row.
    pub times: Vec<f64>,
    /// Segment table in stitching order; the last segment may be shorter.
    pub segments: Vec<SegmentInfo>,
    /// Hand-off step the run was stitched with.
    pub cutoff: usize,
}

/// Roll a window predictor far past its training horizon.
///
/// Each segment predicts one full window from the current state, keeps the
/// first `cutoff` rows (the final segment keeps only the remainder), and
/// restarts the next window from the kept prefix's final row — the hand-off
/// copies that row verbatim, so consecutive segments agree exactly on the
/// shared state. The load is always evaluated on the global time grid
/// `start_time + step · dt`; a segment never restarts the load phase.
///
/// `initial_static` must be the full `{field; rate}` state at `start_time`
/// (width equal to the predictor's output width): the hand-off re-feeds
/// predicted rows as the next window's start state, which is impossible for
/// outputs without a rate half.
pub fn concatenate<P, F>(
    predictor: &P,
    load: F,
    initial_static: &[f64],
    start_time: f64,
    dt: f64,
    horizon: usize,
    cutoff: usize,
) -> Result<LongRunResult>
where
    P: WindowPredictor + ?Sized,
    F: Fn(f64) -> f64,
{
    concatenate_prefixed(predictor, &[], load, initial_static, start_time, dt, horizon, cutoff)
}

/// [`concatenate`] for predictors whose static input carries constant
/// descriptor channels (for example material property profiles) ahead of the
/// restartable state: every window sees `static_prefix ++ state`, and only
/// the state suffix is replaced at each hand-off.
#[allow(clippy::too_many_arguments)]
pub fn concatenate_prefixed<P, F>(
    predictor: &P,
    static_prefix: &[f64],
    load: F,
    initial_state: &[f64],
    start_time: f64,
    dt: f64,
    horizon: usize,
    cutoff: usize,
) -> Result<LongRunResult>
where
    P: WindowPredictor + ?Sized,
    F: Fn(f64) -> f64,
{
    let w = predictor.window_len();
    let width = predictor.output_width();
    if w == 0 {
        return Err(Error::Config(
            "predictor window must be at least one step".into(),
        ));
    }
    if width < 2 || width % 2 != 0 {
        return Err(Error::Config(format!(
            "stitching hands the {{field; rate}} state across segments; output width {width} \
             has no velocity half"
        )));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least one step".into()));
    }
    if cutoff == 0 || cutoff > w {
        return Err(Error::Config(format!(
            "cut-off {cutoff} outside the predictor window 1..={w}"
        )));
    }
    if !dt.is_finite() || !(dt > 0.0) {
        return Err(Error::Config(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    if !start_time.is_finite() {
        return Err(Error::Config(format!(
            "start time must be finite, got {start_time}"
        )));
    }
    if initial_state.len() != width {
        return Err(Error::Config(format!(
            "initial state has {} entries but hand-off needs the full {width}-wide field state",
            initial_state.len()
        )));
    }
    if initial_state.iter().chain(static_prefix).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "initial state contains a non-finite value".into(),
        ));
    }

    // Times come from the global grid so segment boundaries introduce no
    // floating-point drift: step k is always start_time + k·dt.
    let time_at = |step: usize| start_time + step as f64 * dt;

    let mut history = Tensor::zeros(&[horizon, width]);
    let mut times = Vec::with_capacity(horizon);
    let mut segments = Vec::new();
    let mut statics = Vec::with_capacity(static_prefix.len() + width);
    statics.extend_from_slice(static_prefix);
    statics.extend_from_slice(initial_state);
    let mut produced = 0;

    while produced < horizon {
        let segment = segments.len();
        let keep = cutoff.min(horizon - produced);
        let row_times: Vec<f64> = (1..=w).map(|r| time_at(produced + r)).collect();
        let mut in_dyn = Tensor::zeros(&[w, 1]);
        for (r, &t) in row_times.iter().enumerate() {
            let v = load(t);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "load is non-finite at t = {t} (segment {segment})"
                )));
            }
            in_dyn.set2(r, 0, v);
        }

        let pred = predictor
            .predict_window(&statics, &in_dyn, &row_times)
            .map_err(|e| annotate(e, &format!("segment {segment}")))?;
        if pred.shape() != [w, width] {
            return Err(Error::ShapeMismatch {
                op: "window prediction",
                detail: format!(
                    "segment {segment}: predictor returned {:?}, expected [{w}, {width}]",
                    pred.shape()
                ),
            });
        }

        for r in 0..keep {
            history.data_mut()[(produced + r) * width..(produced + r + 1) * width]
                .copy_from_slice(pred.row(r));
            times.push(row_times[r]);
        }
        segments.push(SegmentInfo {
            start_step: produced + 1,
            steps: keep,
            relative_error: None,
        });
        produced += keep;
        if produced < horizon {
            statics[static_prefix.len()..].copy_from_slice(pred.row(keep - 1));
        }
    }

    Ok(LongRunResult { history, times, segments, cutoff })
}

impl LongRunResult {
    /// Number of stitched steps.
    pub fn horizon(&self) -> usize {
        self.history.shape()[0]
    }

    /// Mean relative error of the whole stitched history against a reference
    /// with the same layout; also scores each segment against its own slice
    /// of the reference (each normalized by that slice's span) and stores the
    /// result on the segment table.
    pub fn score_against(&mut self, truth: &Tensor, groups: usize) -> Result<f64> {
        if truth.shape() != self.history.shape() {
            return Err(Error::ShapeMismatch {
                op: "long-run scoring",
                detail: format!("{:?} vs {:?}", truth.shape(), self.history.shape()),
            });
        }
        let width = self.history.shape()[1];
        for seg in &mut self.segments {
            let rows = seg.start_step - 1..seg.start_step - 1 + seg.steps;
            let pred = slice_rows(&self.history, rows.clone(), width)?;
            let reference = slice_rows(truth, rows, width)?;
            seg.relative_error = Some(relative_error_grouped(&pred, &reference, groups)?);
        }
        relative_error_grouped(&self.history, truth, groups)
    }

    /// Write the stitched trajectory as CSV alongside a JSON sidecar holding
    /// the stitching metadata (cut-off, ensemble size, segment table).
    /// `config`, when given, is echoed verbatim into both files so a result
    /// records the settings that produced it.
    pub fn export(
        &self,
        history_path: &Path,
        sidecar_path: &Path,
        ensemble_size: usize,
        config: Option<&str>,
    ) -> Result<()> {
        let (rows, width) = self.history.dim2()?;
        if width % 2 != 0 {
            return Err(Error::Config(format!(
                "stitched history must hold {{field; rate}} halves; width {width} is odd"
            )));
        }
        let half = width / 2;

        let file = fs::File::create(history_path).map_err(|e| Error::io(history_path, e))?;
        let mut out = BufWriter::new(file);
        let written: std::io::Result<()> = (|| {
            writeln!(out, "# cutoff: {}, segments: {}", self.cutoff, self.segments.len())?;
            if let Some(c) = config {
                writeln!(out, "# config: {c}")?;
            }
            write!(out, "step,time")?;
            for k in 0..half {
                write!(out, ",u_{k}")?;
            }
            for k in 0..half {
                write!(out, ",v_{k}")?;
            }
            writeln!(out)?;
            for r in 0..rows {
                write!(out, "{},{}", r + 1, self.times[r])?;
                for &v in self.history.row(r) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        })();
        written.map_err(|e| Error::io(history_path, e))?;

        #[derive(Serialize)]
        struct Sidecar<'a> {
            cutoff: usize,
            ensemble_size: usize,
            segment_count: usize,
            horizon: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            config: Option<&'a str>,
            segments: &'a [SegmentInfo],
        }
        let sidecar = Sidecar {
            cutoff: self.cutoff,
            ensemble_size,
            segment_count: self.segments.len(),
            horizon: rows,
            config,
            segments: &self.segments,
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Manifest {
            path: sidecar_path.to_path_buf(),
            detail: format!("sidecar serialization failed: {e}"),
        })?;
        fs::write(sidecar_path, text + "\n").map_err(|e| Error::io(sidecar_path, e))
    }
}

fn slice_rows(t: &Tensor, rows: Range<usize>, width: usize) -> Result<Tensor> {
    let data = t.data()[rows.start * width..rows.end * width].to_vec();
    Tensor::new(vec![rows.len(), width], data)
}

/// Forwards to an inner predictor while logging every call — lets tests
/// assert what crossed the segment boundary.
#[doc(hidden)]
pub struct RecordingPredictor<'a, P: WindowPredictor> {
    pub inner: &'a P,
    pub calls: RefCell<Vec<(Vec<f64>, Tensor, Vec<f64>)>>,
}

impl<'a, P: WindowPredictor> RecordingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        RecordingPredictor { inner, calls: RefCell::new(Vec::new()) }
    }
}

impl<P: WindowPredictor> WindowPredictor for RecordingPredictor<'_, P> {
    fn window_len(&self) -> usize {
        self.inner.window_len()
    }

    fn output_width(&self) -> usize {
        self.inner.output_width()
    }

    fn predict_window(
        &self,
        in_static: &[f64],
        in_dyn: &Tensor,
        row_times: &[f64],
    ) -> Result<Tensor> {
        self.calls
            .borrow_mut()
            .push((in_static.to_vec(), in_dyn.clone(), row_times.to_vec()));
        self.inner.predict_window(in_static, in_dyn, row_times)
    }
}
