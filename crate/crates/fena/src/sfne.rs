//! Surrogate network elements: a bidirectional recurrent core whose initial
//! states are produced from a static description of the problem, trained on
//! solver-generated response histories.
//!
//! Data flow for one sample:
//!
//! ```text
//! in_static ──► four independent initializer branches ──► h₀/c₀ (fwd and bwd)
//! in_dyn[t] ──► step net ──► bidirectional LSTM ──► readout ──► out[t]
//! ```
//!
//! Each initializer branch owns a private copy of the optional static encoder
//! (plain, MLP, or convolutional) followed by an MLP whose last layer is as
//! wide as one recurrent direction. The branches share no parameters, so each
//! of the four initial states is free to read the static input differently.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::fnv64;
use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::nn::layers::{ConvLayerSpec, ConvNet, Mlp, Phase};
use crate::nn::lstm::{Brnn, BrnnInit};
use crate::nn::optim::{AdamConfig, LrSchedule, Optimizer};
use crate::nn::params::{Bound, ParamId, ParamSet};
use crate::nn::tape::{Tape, Var};
use crate::sample::Sample;
use crate::tensor::Tensor;

/// Box constraint for the trainable loss weights 𝒲₁, 𝒲₂.
const LOSS_WEIGHT_BOUNDS: (f64, f64) = (0.1, 10.0);

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Mean squared error over every output entry.
    PlainMSE,
    /// `𝒲₁·MSE + 𝒲₂·range-normalized MSE`, where the second term divides each
    /// squared error by the square of the truth's per-sample span, separately
    /// for the first and second halves of the output columns (displacement
    /// and velocity blocks). 𝒲₁ and 𝒲₂ start at 1 and are driven *uphill*
    /// during training, clamped to [0.1, 10].
    WeightedRange,
}

/// Layer widths and activations of one fully-connected block. `widths[i]` is
/// the output width of layer `i`; the input width comes from the surrounding
/// architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub widths: Vec<usize>,
    pub acts: Vec<Activation>,
}

impl BlockSpec {
    pub fn new(widths: Vec<usize>, acts: Vec<Activation>) -> BlockSpec {
        BlockSpec { widths, acts }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.acts.len() {
            return Err(Error::Config(format!(
                "{name}: needs one activation per layer and at least one layer \
                 ({} widths, {} activations)",
                self.widths.len(),
                self.acts.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("{name}: zero-width layer")));
        }
        Ok(())
    }

    fn out_width(&self) -> usize {
        *self.widths.last().expect("checked non-empty")
    }
}

/// Shape of the static input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StaticShape {
    /// Flat vector.
    Flat { width: usize },
    /// Channel-major grid sections (`channels` rows of `length` values,
    /// flattened row-major in `Sample::in_static`).
    Channels { channels: usize, length: usize },
}

impl StaticShape {
    pub fn flat_width(self) -> usize {
        match self {
            StaticShape::Flat { width } => width,
            StaticShape::Channels { channels, length } => channels * length,
        }
    }
}

/// Optional transform applied to the static input inside every initializer
/// branch. Each branch holds its own parameters for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StaticEncoder {
    /// Static vector feeds the initializer MLPs directly.
    None,
    /// A fully-connected encoder in front of each initializer MLP.
    Mlp(BlockSpec),
    /// A convolution stack in front of each initializer MLP; requires
    /// `StaticShape::Channels`.
    Conv(Vec<ConvLayerSpec>),
}

/// Complete declarative description of a surrogate network element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Nominal window length in steps. Forward passes accept any length ≥ 1;
    /// this is the length training data is expected to have.
    pub n_t: usize,
    /// Number of spatial nodes the output represents (bookkeeping).
    pub n_x: usize,
    /// Entries per step of the dynamic input.
    pub in_dyn_width: usize,
    pub in_static: StaticShape,
    /// Recurrent units per direction; also the output width of every
    /// initializer branch.
    pub cells_per_direction: usize,
    pub init_fwd_h: BlockSpec,
    pub init_fwd_c: BlockSpec,
    pub init_bwd_h: BlockSpec,
    pub init_bwd_c: BlockSpec,
    /// Per-step block between the dynamic input and the recurrent core.
    pub step_net: BlockSpec,
    /// Block from the concatenated per-step recurrent states to the output
    /// row; its final layer must be linear and as wide as `output_width`.
    pub readout: BlockSpec,
    pub static_encoder: StaticEncoder,
    pub output_width: usize,
    pub loss: LossKind,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0
            || self.n_x == 0
            || self.in_dyn_width == 0
            || self.cells_per_direction == 0
            || self.output_width == 0
        {
            return Err(Error::Config(
                "architecture sizes must all be positive".into(),
            ));
        }
        if self.in_static.flat_width() == 0 {
            return Err(Error::Config("static input has zero width".into()));
        }
        for (name, spec) in [
            ("init_fwd_h", &self.init_fwd_h),
            ("init_fwd_c", &self.init_fwd_c),
            ("init_bwd_h", &self.init_bwd_h),
            ("init_bwd_c", &self.init_bwd_c),
        ] {
            spec.check(name)?;
            if spec.out_width() != self.cells_per_direction {
                return Err(Error::Config(format!(
                    "{name}: last layer must be as wide as the {} recurrent \
                     units per direction, got {}",
                    self.cells_per_direction,
                    spec.out_width()
                )));
            }
        }
        self.step_net.check("step_net")?;
        self.readout.check("readout")?;
        if *self.readout.acts.last().unwrap() != Activation::Linear {
            return Err(Error::Config(
                "readout: final layer must be linear".into(),
            ));
        }
        if self.readout.out_width() != self.output_width {
            return Err(Error::Config(format!(
                "readout: final layer width {} does not match output width {}",
                self.readout.out_width(),
                self.output_width
            )));
        }
        match (&self.static_encoder, self.in_static) {
            (StaticEncoder::Conv(stack), StaticShape::Channels { .. }) => {
                if stack.is_empty() {
                    return Err(Error::Config("empty convolutional encoder".into()));
                }
            }
            (StaticEncoder::Conv(_), StaticShape::Flat { .. }) => {
                return Err(Error::Config(
                    "convolutional encoder needs a channels×length static shape".into(),
                ));
            }
            (StaticEncoder::Mlp(enc), _) => enc.check("static_encoder")?,
            (StaticEncoder::None, _) => {}
        }
        if self.loss == LossKind::WeightedRange && self.output_width % 2 != 0 {
            return Err(Error::Config(
                "range-weighted loss needs an even output width \
                 (displacement and velocity column blocks)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One of the four initial-state branches: a private encoder (possibly the
/// identity) followed by the branch MLP.
#[derive(Clone)]
enum BranchFront {
    Direct,
    Mlp(Mlp),
    Conv(ConvNet),
}

#[derive(Clone)]
struct InitBranch {
    front: BranchFront,
    head: Mlp,
}

impl InitBranch {
    fn build(
        arch: &ArchSpec,
        params: &mut ParamSet,
        name: &str,
        spec: &BlockSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<InitBranch> {
        let flat = arch.in_static.flat_width();
        let (front, head_in) = match &arch.static_encoder {
            StaticEncoder::None => (BranchFront::Direct, flat),
            StaticEncoder::Mlp(enc) => {
                let m = Mlp::build(
                    params,
                    &format!("{name}.enc"),
                    flat,
                    &enc.widths,
                    &enc.acts,
                    rng,
                )?;
                (BranchFront::Mlp(m), enc.out_width())
            }
            StaticEncoder::Conv(stack) => {
                let StaticShape::Channels { channels, length } = arch.in_static else {
                    unreachable!("validated: conv encoder implies channel shape");
                };
                let net = ConvNet::build(params, &format!("{name}.enc"), channels, stack, rng)?;
                let features = net.out_features(length)?;
                (BranchFront::Conv(net), features)
            }
        };
        let head = Mlp::build(
            params,
            &format!("{name}.head"),
            head_in,
            &spec.widths,
            &spec.acts,
            rng,
        )?;
        Ok(InitBranch { front, head })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        arch: &ArchSpec,
        raw_static: Var,
        phase: Phase,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let fed = match &self.front {
            BranchFront::Direct => raw_static,
            BranchFront::Mlp(enc) => enc.forward(tape, bound, raw_static)?,
            BranchFront::Conv(net) => {
                let StaticShape::Channels { channels, length } = arch.in_static else {
                    unreachable!("validated: conv encoder implies channel shape");
                };
                let (b, _) = tape.value(raw_static).dim2()?;
                let grid = tape.reshape(raw_static, vec![b, channels, length])?;
                net.forward(tape, bound, grid, phase, rng)?
            }
        };
        self.head.forward(tape, bound, fed)
    }
}

/// The computation structure of a model: layer objects holding `ParamId`s
/// into the owning model's `ParamSet`.
#[derive(Clone)]
struct Blocks {
    init_fwd_h: InitBranch,
    init_fwd_c: InitBranch,
    init_bwd_h: InitBranch,
    init_bwd_c: InitBranch,
    step_net: Mlp,
    brnn: Brnn,
    readout: Mlp,
    w1: Option<ParamId>,
    w2: Option<ParamId>,
}

impl Blocks {
    /// Full forward pass over a batch. `raw_static` is B×flat, each step a
    /// B×in_dyn_width constant. Returns one B×output_width node per step.
    /// Training-phase dropout draws masks from `rng`, consumed in branch
    /// order fwd-h, fwd-c, bwd-h, bwd-c.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        arch: &ArchSpec,
        raw_static: Var,
        steps: &[Var],
        phase: Phase,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        if steps.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "sfne forward",
                detail: "empty dynamic sequence".into(),
            });
        }
        let h_fwd = self
            .init_fwd_h
            .forward(tape, bound, arch, raw_static, phase, rng.as_deref_mut())?;
        let c_fwd = self
            .init_fwd_c
            .forward(tape, bound, arch, raw_static, phase, rng.as_deref_mut())?;
        let h_bwd = self
            .init_bwd_h
            .forward(tape, bound, arch, raw_static, phase, rng.as_deref_mut())?;
        let c_bwd = self
            .init_bwd_c
            .forward(tape, bound, arch, raw_static, phase, rng.as_deref_mut())?;
        let init = BrnnInit { h_fwd, c_fwd, h_bwd, c_bwd };

        let mut encoded = Vec::with_capacity(steps.len());
        for &s in steps {
            encoded.push(self.step_net.forward(tape, bound, s)?);
        }
        let states = self.brnn.forward(tape, bound, &encoded, &init)?;
        states
            .iter()
            .map(|&s| self.readout.forward(tape, bound, s))
            .collect()
    }

    /// Batch loss node. For the range-weighted kind the per-sample inverse
    /// squared spans come precomputed in `batch.inv_range_sq`.
    fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        preds: &[Var],
        batch: &Batch,
    ) -> Result<Var> {
        let (b, w) = tape.value(preds[0]).dim2()?;
        let entries = (b * preds.len() * w) as f64;
        let mask = batch
            .inv_range_sq
            .as_ref()
            .map(|m| tape.constant(m.clone()));
        let mut plain: Option<Var> = None;
        let mut scaled: Option<Var> = None;
        for (t, &p) in preds.iter().enumerate() {
            let truth = tape.constant(batch.truth[t].clone());
            let d = tape.sub(p, truth)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum_all(sq);
            plain = Some(match plain {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            if let Some(mv) = mask {
                let wsq = tape.mul(sq, mv)?;
                let ws = tape.sum_all(wsq);
                scaled = Some(match scaled {
                    Some(acc) => tape.add(acc, ws)?,
                    None => ws,
                });
            }
        }
        let plain_mean = tape.scale(plain.expect("at least one step"), 1.0 / entries);
        match (self.w1, self.w2) {
            (None, None) => Ok(plain_mean),
            (Some(w1), Some(w2)) => {
                let scaled_mean = tape.scale(scaled.expect("mask present"), 1.0 / entries);
                let t1 = tape.mul_scalar(plain_mean, bound.var(w1))?;
                let t2 = tape.mul_scalar(scaled_mean, bound.var(w2))?;
                tape.add(t1, t2)
            }
            _ => unreachable!("loss weights are allocated together"),
        }
    }
}

/// A surrogate network element: architecture, parameters, and the training
/// bookkeeping (RNG stream, optimizer, epochs completed) needed to resume
/// bit-for-bit from a checkpoint.
#[derive(Clone)]
pub struct SfneModel {
    arch: ArchSpec,
    params: ParamSet,
    blocks: Blocks,
    seed: u64,
    rng: ChaCha8Rng,
    epoch_done: usize,
    opt: Option<Optimizer>,
}

impl std::fmt::Debug for SfneModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SfneModel")
            .field("seed", &self.seed)
            .field("epochs_done", &self.epoch_done)
            .field("param_count", &self.params.total_elements())
            .finish_non_exhaustive()
    }
}

impl SfneModel {
    /// Allocates and initializes all parameters from `seed`. Every trainable
    /// activation scalar starts at its identity-friendly value and, for the
    /// range-weighted loss, 𝒲₁ = 𝒲₂ = 1.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<SfneModel> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_fwd_h = InitBranch::build(arch, &mut params, "init_fwd_h", &arch.init_fwd_h, &mut rng)?;
        let init_fwd_c = InitBranch::build(arch, &mut params, "init_fwd_c", &arch.init_fwd_c, &mut rng)?;
        let init_bwd_h = InitBranch::build(arch, &mut params, "init_bwd_h", &arch.init_bwd_h, &mut rng)?;
        let init_bwd_c = InitBranch::build(arch, &mut params, "init_bwd_c", &arch.init_bwd_c, &mut rng)?;
        let step_net = Mlp::build(
            &mut params,
            "step_net",
            arch.in_dyn_width,
            &arch.step_net.widths,
            &arch.step_net.acts,
            &mut rng,
        )?;
        let brnn = Brnn::init(
            &mut params,
            "brnn",
            arch.step_net.out_width(),
            arch.cells_per_direction,
            &mut rng,
        );
        let readout = Mlp::build(
            &mut params,
            "readout",
            2 * arch.cells_per_direction,
            &arch.readout.widths,
            &arch.readout.acts,
            &mut rng,
        )?;
        let (w1, w2) = match arch.loss {
            LossKind::PlainMSE => (None, None),
            LossKind::WeightedRange => (
                Some(params.add_ascent("loss.w1", Tensor::scalar(1.0), LOSS_WEIGHT_BOUNDS)),
                Some(params.add_ascent("loss.w2", Tensor::scalar(1.0), LOSS_WEIGHT_BOUNDS)),
            ),
        };
        Ok(SfneModel {
            arch: arch.clone(),
            params,
            blocks: Blocks {
                init_fwd_h,
                init_fwd_c,
                init_bwd_h,
                init_bwd_c,
                step_net,
                brnn,
                readout,
                w1,
                w2,
            },
            seed,
            rng,
            epoch_done: 0,
            opt: None,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Epochs completed so far (resumes continue from here).
    pub fn epochs_done(&self) -> usize {
        self.epoch_done
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Current loss weights (𝒲₁, 𝒲₂) when the loss is range-weighted.
    pub fn loss_weights(&self) -> Option<(f64, f64)> {
        match (self.blocks.w1, self.blocks.w2) {
            (Some(w1), Some(w2)) => Some((
                self.params.value(w1).data()[0],
                self.params.value(w2).data()[0],
            )),
            _ => None,
        }
    }

    /// Inference on one sample: `in_dyn` is steps×in_dyn_width, the result
    /// steps×output_width. Deterministic (dropout disabled).
    pub fn forward(&self, in_static: &[f64], in_dyn: &Tensor) -> Result<Tensor> {
        let flat = self.arch.in_static.flat_width();
        if in_static.len() != flat {
            return Err(Error::ShapeMismatch {
                op: "sfne forward",
                detail: format!(
                    "static input has {} entries, architecture expects {flat}",
                    in_static.len()
                ),
            });
        }
        let (steps, dyn_w) = in_dyn.dim2()?;
        if dyn_w != self.arch.in_dyn_width {
            return Err(Error::ShapeMismatch {
                op: "sfne forward",
                detail: format!(
                    "dynamic input is {dyn_w} wide, architecture expects {}",
                    self.arch.in_dyn_width
                ),
            });
        }
        let batch = Batch {
            statics: Tensor::new(vec![1, flat], in_static.to_vec())?,
            steps: (0..steps)
                .map(|r| Tensor::new(vec![1, dyn_w], in_dyn.row(r).to_vec()))
                .collect::<Result<Vec<_>>>()?,
            truth: Vec::new(),
            inv_range_sq: None,
        };
        let preds = self.infer_batch(&batch)?;
        let mut data = Vec::with_capacity(steps * self.arch.output_width);
        for p in &preds {
            data.extend_from_slice(p.row(0));
        }
        Tensor::new(vec![steps, self.arch.output_width], data)
    }

    /// Inference for query-location models: the last static entry is the
    /// position x₀, checked against the domain [0, `length`]. The two output
    /// columns are the field value and its rate at x₀.
    pub fn on_demand_forward(
        &self,
        in_static_with_x0: &[f64],
        in_dyn: &Tensor,
        length: f64,
    ) -> Result<Tensor> {
        if self.arch.output_width != 2 {
            return Err(Error::Config(format!(
                "query-location inference expects a two-column output, \
                 architecture has {}",
                self.arch.output_width
            )));
        }
        let x0 = *in_static_with_x0.last().ok_or_else(|| {
            Error::Config("static input is empty; expected a trailing location entry".into())
        })?;
        if !(0.0..=length).contains(&x0) {
            return Err(Error::Config(format!(
                "query location x0 = {x0} outside the domain [0, {length}]"
            )));
        }
        self.forward(in_static_with_x0, in_dyn)
    }

    /// Batched inference over many samples, returned in input order. Samples
    /// are grouped into batches of up to `batch_size` with equal step counts.
    pub fn predict_all(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<Tensor>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let w = self.arch.output_width;
        let mut out: Vec<Option<Tensor>> = vec![None; samples.len()];
        let mut start = 0;
        while start < samples.len() {
            let steps = samples[start].steps();
            let mut end = start + 1;
            while end < samples.len()
                && end - start < batch_size
                && samples[end].steps() == steps
            {
                end += 1;
            }
            let idx: Vec<usize> = (start..end).collect();
            let batch = assemble_batch(samples, &idx, &self.arch, false)?;
            let preds = self.infer_batch(&batch)?;
            for (row, slot) in (start..end).enumerate() {
                let mut data = Vec::with_capacity(steps * w);
                for p in &preds {
                    data.extend_from_slice(p.row(row));
                }
                out[slot] = Some(Tensor::new(vec![steps, w], data)?);
            }
            start = end;
        }
        Ok(out.into_iter().map(|t| t.expect("all slots filled")).collect())
    }

    /// Percentage error of each sample's prediction against its target, the
    /// output columns split into `groups` equal blocks normalized separately.
    pub fn relative_errors(
        &self,
        samples: &[Sample],
        groups: usize,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        let preds = self.predict_all(samples, batch_size)?;
        preds
            .iter()
            .zip(samples)
            .map(|(p, s)| relative_error_grouped(p, &s.out, groups))
            .collect()
    }

    /// Mean of [`SfneModel::relative_errors`] over the sample set.
    pub fn mean_relative_error(
        &self,
        samples: &[Sample],
        groups: usize,
        batch_size: usize,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("empty evaluation set".into()));
        }
        let errs = self.relative_errors(samples, groups, batch_size)?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }

    /// Inference-phase forward over an assembled batch: one B×output_width
    /// tensor per step.
    fn infer_batch(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let statics = tape.constant(batch.statics.clone());
        let steps: Vec<Var> = batch
            .steps
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let preds = self.blocks.forward(
            &mut tape,
            &bound,
            &self.arch,
            statics,
            &steps,
            Phase::Infer,
            None,
        )?;
        Ok(preds.iter().map(|&p| tape.value(p).clone()).collect())
    }
}

/// One training batch: stacked static inputs, per-step dynamic inputs and
/// targets, and (for the range-weighted loss) per-sample inverse squared
/// spans broadcast over the output columns.
struct Batch {
    statics: Tensor,
    steps: Vec<Tensor>,
    truth: Vec<Tensor>,
    inv_range_sq: Option<Tensor>,
}

fn assemble_batch(
    samples: &[Sample],
    idx: &[usize],
    arch: &ArchSpec,
    with_truth: bool,
) -> Result<Batch> {
    debug_assert!(!idx.is_empty());
    let b = idx.len();
    let flat = arch.in_static.flat_width();
    let steps = samples[idx[0]].steps();
    let w = arch.output_width;

    let mut statics = Vec::with_capacity(b * flat);
    for &i in idx {
        let s = &samples[i];
        if s.in_static.len() != flat {
            return Err(Error::ShapeMismatch {
                op: "batch assembly",
                detail: format!(
                    "sample {i}: static input has {} entries, architecture expects {flat}",
                    s.in_static.len()
                ),
            });
        }
        let (t, dyn_w) = s.in_dyn.dim2()?;
        if dyn_w != arch.in_dyn_width || t != steps {
            return Err(Error::ShapeMismatch {
                op: "batch assembly",
                detail: format!(
                    "sample {i}: dynamic input is {t}×{dyn_w}, expected {steps}×{}",
                    arch.in_dyn_width
                ),
            });
        }
        if with_truth {
            let (to, wo) = s.out.dim2()?;
            if to != steps || wo != w {
                return Err(Error::ShapeMismatch {
                    op: "batch assembly",
                    detail: format!(
                        "sample {i}: target is {to}×{wo}, expected {steps}×{w}"
                    ),
                });
            }
        }
        statics.extend_from_slice(&s.in_static);
    }

    let mut step_tensors = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut row = Vec::with_capacity(b * arch.in_dyn_width);
        for &i in idx {
            row.extend_from_slice(samples[i].in_dyn.row(t));
        }
        step_tensors.push(Tensor::new(vec![b, arch.in_dyn_width], row)?);
    }

    let mut truth = Vec::new();
    if with_truth {
        for t in 0..steps {
            let mut row = Vec::with_capacity(b * w);
            for &i in idx {
                row.extend_from_slice(samples[i].out.row(t));
            }
            truth.push(Tensor::new(vec![b, w], row)?);
        }
    }

    let inv_range_sq = if with_truth && arch.loss == LossKind::WeightedRange {
        let half = w / 2;
        let mut mask = Vec::with_capacity(b * w);
        for &i in idx {
            let out = &samples[i].out;
            for (lo_col, hi_col) in [(0, half), (half, w)] {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for t in 0..steps {
                    for &v in &out.row(t)[lo_col..hi_col] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let span = hi - lo;
                if !(span > 0.0) {
                    return Err(Error::Numeric(format!(
                        "sample {i}: target columns {lo_col}..{hi_col} are constant; \
                         the range-weighted loss is undefined"
                    )));
                }
                mask.extend(std::iter::repeat(1.0 / (span * span)).take(half));
            }
        }
        Some(Tensor::new(vec![b, w], mask)?)
    } else {
        None
    };

    Ok(Batch {
        statics: Tensor::new(vec![b, flat], statics)?,
        steps: step_tensors,
        truth,
        inv_range_sq,
    })
}

/// Mean squared error over every entry.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let n = pred.len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// Range-weighted loss of a single sample history (rows = steps). The first
/// and second halves of the columns are normalized by their own squared
/// spans: `w1·mean(d²) + w2·mean(d²/span²)`.
pub fn weighted_range_loss(pred: &Tensor, truth: &Tensor, w1: f64, w2: f64) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "weighted range loss",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let (steps, w) = truth.dim2()?;
    if w % 2 != 0 {
        return Err(Error::Config(
            "range-weighted loss needs an even number of columns".into(),
        ));
    }
    let half = w / 2;
    let mut inv_sq = [0.0; 2];
    for (k, (lo_col, hi_col)) in [(0, half), (half, w)].into_iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..steps {
            for &v in &truth.row(t)[lo_col..hi_col] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = hi - lo;
        if !(span > 0.0) {
            return Err(Error::Numeric(format!(
                "target columns {lo_col}..{hi_col} are constant; \
                 the range-weighted loss is undefined"
            )));
        }
        inv_sq[k] = 1.0 / (span * span);
    }
    let mut plain = 0.0;
    let mut scaled = 0.0;
    for t in 0..steps {
        for (c, (&p, &tv)) in pred.row(t).iter().zip(truth.row(t)).enumerate() {
            let d2 = (p - tv) * (p - tv);
            plain += d2;
            scaled += d2 * inv_sq[usize::from(c >= half)];
        }
    }
    let n = (steps * w) as f64;
    Ok(w1 * plain / n + w2 * scaled / n)
}

/// Scalar loss of one predicted history under either objective. `weights`
/// are (𝒲₁, 𝒲₂), ignored for the plain kind.
pub fn loss_value(
    kind: LossKind,
    pred: &Tensor,
    truth: &Tensor,
    weights: (f64, f64),
) -> Result<f64> {
    match kind {
        LossKind::PlainMSE => mse(pred, truth),
        LossKind::WeightedRange => weighted_range_loss(pred, truth, weights.0, weights.1),
    }
}

/// Percentage error of a predicted history against a reference: mean
/// absolute difference over every entry, divided by the reference's global
/// span (max − min), times 100.
pub fn relative_error(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "relative error",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in truth.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Numeric(
            "relative error undefined for a constant reference history".into(),
        ));
    }
    let mean = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(100.0 * mean / range)
}

/// [`relative_error`] computed separately on `groups` equal column blocks
/// (each normalized by its own span) and averaged. With `groups = 1` this is
/// exactly the plain metric.
pub fn relative_error_grouped(pred: &Tensor, truth: &Tensor, groups: usize) -> Result<f64> {
    if groups == 0 {
        return Err(Error::Config("need at least one column group".into()));
    }
    if groups == 1 {
        return relative_error(pred, truth);
    }
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "relative error",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let (steps, w) = truth.dim2()?;
    if w % groups != 0 {
        return Err(Error::Config(format!(
            "{w} columns cannot be split into {groups} equal groups"
        )));
    }
    let gw = w / groups;
    let mut total = 0.0;
    for g in 0..groups {
        let cols = g * gw..(g + 1) * gw;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut abs_sum = 0.0;
        for t in 0..steps {
            let pr = &pred.row(t)[cols.clone()];
            let tr = &truth.row(t)[cols.clone()];
            for (&p, &tv) in pr.iter().zip(tr) {
                lo = lo.min(tv);
                hi = hi.max(tv);
                abs_sum += (p - tv).abs();
            }
        }
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::Numeric(format!(
                "relative error undefined: column group {g} of the reference is constant"
            )));
        }
        let mean = abs_sum / (steps * gw) as f64;
        total += 100.0 * mean / range;
    }
    Ok(total / groups as f64)
}

/// Training hyperparameters. The split fraction is carried for callers that
/// partition data themselves; `train` receives already-split sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub split_fraction: f64,
}

impl TrainConfig {
    /// Defaults used for the rod studies: 1000 epochs, batches of 64,
    /// lr 10⁻³ halved every 300 epochs, 85/15 split.
    pub fn rod_default() -> TrainConfig {
        TrainConfig {
            epochs: 1000,
            batch_size: 64,
            lr0: 1e-3,
            schedule: LrSchedule::StepDecay { period: 300, factor: 2.0 },
            split_fraction: 0.85,
        }
    }

    /// Defaults used for the beam studies: 1500 epochs, batches of 64,
    /// lr 2·10⁻⁴ halved after 75 stagnant epochs, 85/15 split.
    pub fn beam_default() -> TrainConfig {
        TrainConfig {
            epochs: 1500,
            batch_size: 64,
            lr0: 2e-4,
            schedule: LrSchedule::Plateau { patience: 75, factor: 2.0 },
            split_fraction: 0.85,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

/// Per-epoch training record. `lr` is the rate the epoch was run with;
/// `test_loss` is NaN when no test set was supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
}

/// Minibatch training, resumable: epochs `model.epochs_done()..cfg.epochs`
/// are run, each reshuffling the training set from the model's own RNG
/// stream. Returns one record per epoch run. The test set is monitored only
/// — it never influences the parameters (the plateau schedule watches the
/// training loss).
pub fn train(
    model: &mut SfneModel,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    match &model.opt {
        Some(opt) => {
            if opt.cfg.lr0 != cfg.lr0 || opt.schedule != cfg.schedule {
                return Err(Error::Config(
                    "resumed training must keep the original learning rate and schedule".into(),
                ));
            }
        }
        None => {
            let adam = AdamConfig { lr0: cfg.lr0, ..AdamConfig::default() };
            model.opt = Some(Optimizer::new(adam, cfg.schedule, &model.params));
        }
    }
    let mut curves = Vec::new();
    for epoch in model.epoch_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut model.rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(train_set, chunk, &model.arch, true)
                .map_err(|e| annotate(e, &format!("epoch {epoch}, batch {bi}")))?;
            let loss = train_batch(model, &batch)
                .map_err(|e| annotate(e, &format!("epoch {epoch}, batch {bi}")))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let test_loss = if test_set.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(model, test_set, cfg.batch_size)?
        };
        let opt = model.opt.as_mut().expect("created above");
        let lr = opt.lr();
        opt.end_epoch(epoch, train_loss);
        curves.push(EpochStats { epoch, train_loss, test_loss, lr });
        model.epoch_done = epoch + 1;
    }
    Ok(curves)
}

/// One gradient step on an assembled batch; returns the batch loss.
fn train_batch(model: &mut SfneModel, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let statics = tape.constant(batch.statics.clone());
    let steps: Vec<Var> = batch
        .steps
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let preds = model.blocks.forward(
        &mut tape,
        &bound,
        &model.arch,
        statics,
        &steps,
        Phase::Train,
        Some(&mut model.rng),
    )?;
    let root = model.blocks.loss(&mut tape, &bound, &preds, batch)?;
    let loss = tape.value(root).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = tape.backward(root)?;
    let gvec: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    model
        .opt
        .as_mut()
        .expect("optimizer exists during training")
        .step(&mut model.params, &gvec)?;
    Ok(loss)
}

/// Loss of `set` under the model's objective (current 𝒲 values included),
/// inference mode, batched.
pub fn evaluate_loss(model: &SfneModel, set: &[Sample], batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size) {
        let batch = assemble_batch(set, chunk, &model.arch, true)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let statics = tape.constant(batch.statics.clone());
        let steps: Vec<Var> = batch
            .steps
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let preds = model.blocks.forward(
            &mut tape,
            &bound,
            &model.arch,
            statics,
            &steps,
            Phase::Infer,
            None,
        )?;
        let root = model.blocks.loss(&mut tape, &bound, &preds, &batch)?;
        sum += tape.value(root).item()? * chunk.len() as f64;
    }
    Ok(sum / set.len() as f64)
}

/// Appends context to message-bearing errors; path-bearing errors keep their
/// variant (and exit class) with the note folded into their detail text.
pub(crate) fn annotate(e: Error, note: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{note}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{note}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{note}: {m}")),
        Error::ShapeMismatch { op, detail } => Error::ShapeMismatch {
            op,
            detail: format!("{note}: {detail}"),
        },
        Error::Io { path, source } => Error::Io {
            path,
            source: std::io::Error::new(source.kind(), format!("{note}: {source}")),
        },
        Error::Manifest { path, detail } => Error::Manifest {
            path,
            detail: format!("{note}: {detail}"),
        },
        other => other,
    }
}

/// Derives the seed for ensemble member `member` from a base seed
/// (splitmix64 finalizer over the pair).
pub fn derive_member_seed(base: u64, member: u64) -> u64 {
    let mut z = base.wrapping_add((member + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bagged collection of models sharing one architecture; the ensemble
/// prediction is the elementwise mean over members.
pub struct Ensemble {
    pub members: Vec<SfneModel>,
}

impl std::fmt::Debug for Ensemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ensemble")
            .field("members", &self.members.len())
            .finish_non_exhaustive()
    }
}

impl Ensemble {
    pub fn new(members: Vec<SfneModel>) -> Result<Ensemble> {
        let Some(first) = members.first() else {
            return Err(Error::Config("ensemble needs at least one member".into()));
        };
        if members.iter().any(|m| m.arch != first.arch) {
            return Err(Error::Config(
                "ensemble members must share one architecture".into(),
            ));
        }
        Ok(Ensemble { members })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.members[0].arch
    }

    /// Mean of the members' predictions for one sample.
    pub fn forward(&self, in_static: &[f64], in_dyn: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for m in &self.members {
            let p = m.forward(in_static, in_dyn)?;
            acc = Some(match acc {
                Some(a) => a.zip_map(&p, "ensemble mean", |x, y| x + y)?,
                None => p,
            });
        }
        let k = self.members.len() as f64;
        Ok(acc.expect("non-empty by construction").map(|v| v / k))
    }

    /// Mean prediction per sample, batched per member.
    pub fn predict_all(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<Tensor>> {
        let mut acc: Option<Vec<Tensor>> = None;
        for m in &self.members {
            let preds = m.predict_all(samples, batch_size)?;
            acc = Some(match acc {
                Some(a) => a
                    .iter()
                    .zip(&preds)
                    .map(|(x, y)| x.zip_map(y, "ensemble mean", |u, v| u + v))
                    .collect::<Result<Vec<_>>>()?,
                None => preds,
            });
        }
        let k = self.members.len() as f64;
        Ok(acc
            .expect("non-empty by construction")
            .into_iter()
            .map(|t| t.map(|v| v / k))
            .collect())
    }

    /// Per-sample percentage errors of the ensemble prediction.
    pub fn relative_errors(
        &self,
        samples: &[Sample],
        groups: usize,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        let preds = self.predict_all(samples, batch_size)?;
        preds
            .iter()
            .zip(samples)
            .map(|(p, s)| relative_error_grouped(p, &s.out, groups))
            .collect()
    }

    pub fn mean_relative_error(
        &self,
        samples: &[Sample],
        groups: usize,
        batch_size: usize,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("empty evaluation set".into()));
        }
        let errs = self.relative_errors(samples, groups, batch_size)?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Trains `k` members in parallel, each on its own dataset and seed. The
/// factory is called with the member index and its derived seed and returns
/// that member's (train, test) sets — bagging is the caller's choice of
/// factory. If any member fails, the error reports which members survived.
pub fn train_ensemble<F>(
    arch: &ArchSpec,
    dataset_factory: F,
    k: usize,
    cfg: &TrainConfig,
    base_seed: u64,
) -> Result<(Ensemble, Vec<Vec<EpochStats>>)>
where
    F: Fn(usize, u64) -> Result<(Vec<Sample>, Vec<Sample>)> + Sync,
{
    if k == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let results: Vec<Result<(SfneModel, Vec<EpochStats>)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let seed = derive_member_seed(base_seed, i as u64);
            let (train_set, test_set) = dataset_factory(i, seed)?;
            let mut member = SfneModel::build(arch, seed)?;
            let curves = train(&mut member, &train_set, &test_set, cfg)?;
            Ok((member, curves))
        })
        .collect();

    let survivors: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_ok())
        .map(|(i, _)| i)
        .collect();
    let mut members = Vec::with_capacity(k);
    let mut curves = Vec::with_capacity(k);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, c)) => {
                members.push(m);
                curves.push(c);
            }
            Err(e) => {
                return Err(annotate(
                    e,
                    &format!("ensemble member {i} failed (members {survivors:?} trained)"),
                ));
            }
        }
    }
    Ok((Ensemble::new(members)?, curves))
}

// ---------------------------------------------------------------------------
// Checkpointing
//
// Single file: a UTF-8 key/value manifest, a `---` separator line, then one
// little-endian float64 blob holding every named tensor (parameters first,
// then optimizer moments) at the offsets the manifest records.
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_KIND: &str = "sfne-checkpoint";

#[derive(Serialize, Deserialize)]
struct OptPersist {
    adam: AdamConfig,
    schedule: LrSchedule,
}

fn dims_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|p| p.parse().ok()).collect()
}

/// One named tensor record: where its elements sit in the blob.
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    elements: usize,
}

fn parse_tensor_record(rest: &str) -> Option<TensorRecord> {
    let mut it = rest.split_whitespace();
    let name = it.next()?.to_string();
    let shape = parse_dims(it.next()?)?;
    let offset = it.next()?.parse().ok()?;
    let elements = it.next()?.parse().ok()?;
    if it.next().is_some() || shape.iter().product::<usize>() != elements {
        return None;
    }
    Some(TensorRecord { name, shape, offset, elements })
}

impl SfneModel {
    /// Writes the model (and optimizer state, if training has started) to a
    /// single checkpoint file. Loading it back reproduces the model bitwise,
    /// including the RNG stream position, so training can resume as if it
    /// had never stopped.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = String::new();
        let push_tensor = |blob: &mut Vec<u8>, line: &mut String, tag: &str, name: &str, t: &Tensor| {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(
                line,
                "{tag}: {name} {} {offset} {}",
                dims_string(t.shape()),
                t.len()
            );
        };

        let _ = writeln!(manifest, "format_version: {CHECKPOINT_VERSION}");
        let _ = writeln!(manifest, "kind: {CHECKPOINT_KIND}");
        let arch_json = serde_json::to_string(&self.arch)
            .map_err(|e| Error::Config(format!("architecture not serializable: {e}")))?;
        let _ = writeln!(manifest, "arch: {arch_json}");
        let _ = writeln!(manifest, "seed: {}", self.seed);
        let _ = writeln!(manifest, "epoch_done: {}", self.epoch_done);
        let seed_hex: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(manifest, "rng_seed: {seed_hex}");
        let _ = writeln!(manifest, "rng_stream: {}", self.rng.get_stream());
        let _ = writeln!(manifest, "rng_word_pos: {}", self.rng.get_word_pos());

        let mut tensor_lines = String::new();
        for (name, t) in self.params.iter() {
            push_tensor(&mut blob, &mut tensor_lines, "tensor", name, t);
        }
        if let Some(opt) = &self.opt {
            let opt_json = serde_json::to_string(&OptPersist {
                adam: opt.cfg,
                schedule: opt.schedule,
            })
            .map_err(|e| Error::Config(format!("optimizer state not serializable: {e}")))?;
            let _ = writeln!(manifest, "optimizer: {opt_json}");
            for (name, v) in opt.state_scalars() {
                let _ = writeln!(manifest, "opt_scalar: {name} {v:?}");
            }
            let (m, v) = opt.moment_tensors();
            let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
            for (name, t) in names.iter().zip(m) {
                push_tensor(&mut blob, &mut tensor_lines, "moment_m", name, t);
            }
            for (name, t) in names.iter().zip(v) {
                push_tensor(&mut blob, &mut tensor_lines, "moment_v", name, t);
            }
        }
        manifest.push_str(&tensor_lines);
        let _ = writeln!(manifest, "blob_fnv64: {:016x}", fnv64(&blob));

        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(b"---\n");
        bytes.extend_from_slice(&blob);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`SfneModel::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<SfneModel> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let sep = b"\n---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| manifest_err(path, "missing manifest/blob separator"))?;
        let manifest = std::str::from_utf8(&bytes[..pos + 1])
            .map_err(|_| manifest_err(path, "manifest is not valid UTF-8"))?;
        let blob = &bytes[pos + sep.len()..];

        let mut version: Option<String> = None;
        let mut kind: Option<&str> = None;
        let mut arch: Option<ArchSpec> = None;
        let mut seed: Option<u64> = None;
        let mut epoch_done: Option<usize> = None;
        let mut rng_seed: Option<[u8; 32]> = None;
        let mut rng_stream: Option<u64> = None;
        let mut rng_word_pos: Option<u128> = None;
        let mut opt_persist: Option<OptPersist> = None;
        let mut opt_scalars: Vec<(String, f64)> = Vec::new();
        let mut tensors: Vec<TensorRecord> = Vec::new();
        let mut moments_m: Vec<TensorRecord> = Vec::new();
        let mut moments_v: Vec<TensorRecord> = Vec::new();
        let mut blob_sum: Option<u64> = None;

        for line in manifest.lines() {
            let (key, rest) = line
                .split_once(": ")
                .ok_or_else(|| manifest_err(path, format!("malformed line `{line}`")))?;
            match key {
                "format_version" => version = Some(rest.to_string()),
                "kind" => kind = Some(rest),
                "arch" => {
                    arch = Some(serde_json::from_str(rest).map_err(|e| {
                        manifest_err(path, format!("architecture does not parse: {e}"))
                    })?);
                }
                "seed" => {
                    seed = Some(rest.parse().map_err(|_| {
                        manifest_err(path, format!("bad seed `{rest}`"))
                    })?);
                }
                "epoch_done" => {
                    epoch_done = Some(rest.parse().map_err(|_| {
                        manifest_err(path, format!("bad epoch count `{rest}`"))
                    })?);
                }
                "rng_seed" => {
                    let hex = rest.as_bytes();
                    if hex.len() != 64 {
                        return Err(manifest_err(path, "RNG seed must be 64 hex digits"));
                    }
                    let mut buf = [0u8; 32];
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&rest[2 * i..2 * i + 2], 16)
                            .map_err(|_| manifest_err(path, "RNG seed is not hex"))?;
                    }
                    rng_seed = Some(buf);
                }
                "rng_stream" => {
                    rng_stream = Some(rest.parse().map_err(|_| {
                        manifest_err(path, format!("bad RNG stream `{rest}`"))
                    })?);
                }
                "rng_word_pos" => {
                    rng_word_pos = Some(rest.parse().map_err(|_| {
                        manifest_err(path, format!("bad RNG position `{rest}`"))
                    })?);
                }
                "optimizer" => {
                    opt_persist = Some(serde_json::from_str(rest).map_err(|e| {
                        manifest_err(path, format!("optimizer settings do not parse: {e}"))
                    })?);
                }
                "opt_scalar" => {
                    let (name, value) = rest
                        .split_once(' ')
                        .ok_or_else(|| manifest_err(path, format!("malformed scalar `{rest}`")))?;
                    let v = value.parse().map_err(|_| {
                        manifest_err(path, format!("bad scalar value `{value}`"))
                    })?;
                    opt_scalars.push((name.to_string(), v));
                }
                "tensor" | "moment_m" | "moment_v" => {
                    let rec = parse_tensor_record(rest)
                        .ok_or_else(|| manifest_err(path, format!("malformed record `{rest}`")))?;
                    match key {
                        "tensor" => tensors.push(rec),
                        "moment_m" => moments_m.push(rec),
                        _ => moments_v.push(rec),
                    }
                }
                "blob_fnv64" => {
                    blob_sum = Some(u64::from_str_radix(rest, 16).map_err(|_| {
                        manifest_err(path, format!("malformed checksum `{rest}`"))
                    })?);
                }
                other => {
                    return Err(manifest_err(path, format!("unrecognized key `{other}`")));
                }
            }
        }

        match version {
            Some(v) if v == CHECKPOINT_VERSION.to_string() => {}
            Some(v) => {
                return Err(Error::FormatVersion {
                    path: path.to_path_buf(),
                    found: v,
                    expected: CHECKPOINT_VERSION,
                });
            }
            None => return Err(manifest_err(path, "missing format_version")),
        }
        if kind != Some(CHECKPOINT_KIND) {
            return Err(manifest_err(path, "not a model checkpoint"));
        }
        let arch = arch.ok_or_else(|| manifest_err(path, "missing architecture"))?;
        let seed = seed.ok_or_else(|| manifest_err(path, "missing seed"))?;
        let epoch_done = epoch_done.ok_or_else(|| manifest_err(path, "missing epoch count"))?;

        let expected: usize = tensors
            .iter()
            .chain(&moments_m)
            .chain(&moments_v)
            .map(|r| r.offset + 8 * r.elements)
            .max()
            .unwrap_or(0);
        if blob.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                blob: "checkpoint".into(),
                expected: expected as u64,
                found: blob.len() as u64,
            });
        }
        if blob.len() > expected {
            return Err(manifest_err(path, "blob has trailing bytes"));
        }
        let declared = blob_sum.ok_or_else(|| manifest_err(path, "missing checksum"))?;
        if fnv64(blob) != declared {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                blob: "checkpoint".into(),
            });
        }

        let decode = |rec: &TensorRecord| -> Result<Tensor> {
            let bytes = &blob[rec.offset..rec.offset + 8 * rec.elements];
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::new(rec.shape.clone(), data)
        };

        let mut model = SfneModel::build(&arch, seed)?;
        if tensors.len() != model.params.len() {
            return Err(manifest_err(
                path,
                format!(
                    "checkpoint lists {} tensors, architecture has {} parameters",
                    tensors.len(),
                    model.params.len()
                ),
            ));
        }
        for rec in &tensors {
            let t = decode(rec)?;
            model
                .params
                .restore(&rec.name, t)
                .map_err(|e| annotate(e, &format!("{}", path.display())))?;
        }

        let (Some(seed_bytes), Some(stream), Some(word_pos)) =
            (rng_seed, rng_stream, rng_word_pos)
        else {
            return Err(manifest_err(path, "missing RNG state"));
        };
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        model.rng = rng;
        model.epoch_done = epoch_done;

        if let Some(persist) = opt_persist {
            let mut opt = Optimizer::new(persist.adam, persist.schedule, &model.params);
            let take = |records: Vec<TensorRecord>, what: &str| -> Result<Vec<Tensor>> {
                if records.len() != model.params.len() {
                    return Err(manifest_err(
                        path,
                        format!("expected {} {what} records, found {}", model.params.len(), records.len()),
                    ));
                }
                let mut by_name: std::collections::HashMap<String, Tensor> = records
                    .iter()
                    .map(|r| decode(r).map(|t| (r.name.clone(), t)))
                    .collect::<Result<_>>()?;
                let mut ordered = Vec::with_capacity(model.params.len());
                for (name, _) in model.params.iter() {
                    let t = by_name.remove(name).ok_or_else(|| {
                        manifest_err(path, format!("missing {what} record for `{name}`"))
                    })?;
                    ordered.push(t);
                }
                Ok(ordered)
            };
            let m = take(moments_m, "first-moment")?;
            let v = take(moments_v, "second-moment")?;
            opt.restore_state(&opt_scalars, m, v)?;
            model.opt = Some(opt);
        }
        Ok(model)
    }
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Convenience: the checkpoint path for an ensemble member inside `dir`.
pub fn member_path(dir: impl AsRef<Path>, member: usize) -> PathBuf {
    dir.as_ref().join(format!("member{member}.ckpt"))
}

impl Ensemble {
    /// Saves each member as `member<i>.ckpt` inside `dir` (created if
    /// needed).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.members.iter().enumerate() {
            m.save(member_path(dir, i))?;
        }
        Ok(())
    }

    /// Loads `member0.ckpt`, `member1.ckpt`, ... from `dir` until the first
    /// missing index.
    pub fn load(dir: impl AsRef<Path>) -> Result<Ensemble> {
        let dir = dir.as_ref();
        let mut members = Vec::new();
        loop {
            let path = member_path(dir, members.len());
            if !path.exists() {
                break;
            }
            members.push(SfneModel::load(path)?);
        }
        if members.is_empty() {
            return Err(Error::Config(format!(
                "no member checkpoints found in {}",
                dir.display()
            )));
        }
        Ensemble::new(members)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use rand::Rng;

    fn block(widths: &[usize], acts: &[Activation]) -> BlockSpec {
        BlockSpec::new(widths.to_vec(), acts.to_vec())
    }

    /// Small flat-static architecture: 5 output nodes with two channels.
    fn tiny_arch(loss: LossKind) -> ArchSpec {
        use Activation::*;
        ArchSpec {
            n_t: 3,
            n_x: 5,
            in_dyn_width: 1,
            in_static: StaticShape::Flat { width: 10 },
            cells_per_direction: 2,
            init_fwd_h: block(&[4, 2], &[Tanh, ESwish]),
            init_fwd_c: block(&[4, 2], &[Tanh, ESwish]),
            init_bwd_h: block(&[4, 2], &[Tanh, ESwish]),
            init_bwd_c: block(&[4, 2], &[Tanh, ESwish]),
            step_net: block(&[4, 3], &[Tanh, ESwish]),
            readout: block(&[4, 10], &[Tanh, Linear]),
            static_encoder: StaticEncoder::None,
            output_width: 10,
            loss,
        }
    }

    /// Tiny channels-static architecture with a private conv encoder per
    /// branch, exercising every layer kind end to end.
    fn tiny_conv_arch(loss: LossKind) -> ArchSpec {
        use Activation::*;
        ArchSpec {
            n_t: 3,
            n_x: 5,
            in_dyn_width: 1,
            in_static: StaticShape::Channels { channels: 2, length: 5 },
            cells_per_direction: 2,
            init_fwd_h: block(&[3, 2], &[Tanh, ESwish]),
            init_fwd_c: block(&[3, 2], &[Tanh, ESwish]),
            init_bwd_h: block(&[3, 2], &[Tanh, ESwish]),
            init_bwd_c: block(&[3, 2], &[Tanh, ESwish]),
            step_net: block(&[3], &[Snake]),
            readout: block(&[4, 10], &[ESwish, Linear]),
            static_encoder: StaticEncoder::Conv(vec![
                ConvLayerSpec::Conv { out_channels: 3, kernel: 2, stride: 1 },
                ConvLayerSpec::MaxPool { width: 2, stride: 2 },
                ConvLayerSpec::Dropout { rate: 0.25 },
            ]),
            output_width: 10,
            loss,
        }
    }

    fn toy_samples(arch: &ArchSpec, n: usize, steps: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = arch.in_static.flat_width();
        (0..n)
            .map(|_| {
                let in_static: Vec<f64> =
                    (0..flat).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let phase: f64 = rng.gen_range(0.0..6.28);
                let dyn_data: Vec<f64> = (0..steps * arch.in_dyn_width)
                    .map(|i| (0.4 * i as f64 + phase).sin())
                    .collect();
                let out_data: Vec<f64> = (0..steps)
                    .flat_map(|t| {
                        let phase = phase;
                        (0..arch.output_width).map(move |j| {
                            0.5 * (0.3 * t as f64 + 0.2 * j as f64 + phase).sin()
                        })
                    })
                    .collect();
                Sample::new(
                    in_static,
                    Tensor::new(vec![steps, arch.in_dyn_width], dyn_data).unwrap(),
                    Tensor::new(vec![steps, arch.output_width], out_data).unwrap(),
                    vec![],
                )
                .unwrap()
            })
            .collect()
    }

    fn quick_cfg(epochs: usize, lr0: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 5,
            lr0,
            schedule: LrSchedule::Constant,
            split_fraction: 0.85,
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let a = SfneModel::build(&arch, 7).unwrap();
        let b = SfneModel::build(&arch, 7).unwrap();
        let c = SfneModel::build(&arch, 8).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn paper_case1_preset_shape_has_hand_audited_parameter_count() {
        use Activation::*;
        // Architecture of the full-size rod model behind the `paper-case1`
        // preset; the expected count is summed layer by layer below.
        let arch = ArchSpec {
            n_t: 100,
            n_x: 51,
            in_dyn_width: 1,
            in_static: StaticShape::Flat { width: 1 },
            cells_per_direction: 50,
            init_fwd_h: block(&[20, 50], &[Tanh, ESwish]),
            init_fwd_c: block(&[20, 50], &[Tanh, ESwish]),
            init_bwd_h: block(&[20, 50], &[Tanh, ESwish]),
            init_bwd_c: block(&[20, 50], &[Tanh, ESwish]),
            step_net: block(&[20, 60, 60, 60], &[Tanh, ESwish, ESwish, ESwish]),
            readout: block(
                &[50, 60, 60, 60, 60, 60, 60, 51],
                &[ESwish, ESwish, ESwish, ESwish, ESwish, ESwish, ESwish, Linear],
            ),
            static_encoder: StaticEncoder::None,
            output_width: 51,
            loss: LossKind::PlainMSE,
        };
        let model = SfneModel::build(&arch, 0).unwrap();

        let init_branch = (1 * 20 + 20) + (20 * 50 + 50 + 1); // dense + dense with ESwish β
        let step_net = (1 * 20 + 20) + 3 * (0) // placeholder, expanded below
            + (20 * 60 + 60 + 1) + (60 * 60 + 60 + 1) + (60 * 60 + 60 + 1);
        let lstm_per_dir = 60 * (4 * 50) + 50 * (4 * 50) + 4 * 50;
        let readout = (100 * 50 + 50 + 1)
            + (50 * 60 + 60 + 1)
            + 5 * (60 * 60 + 60 + 1)
            + (60 * 51 + 51);
        let total = 4 * init_branch + step_net + 2 * lstm_per_dir + readout;
        assert_eq!(total, 86_915);
        assert_eq!(model.param_count(), total);
    }

    #[test]
    fn invalid_architectures_are_refused_with_block_names() {
        let mut bad_init = tiny_arch(LossKind::PlainMSE);
        bad_init.init_bwd_c.widths = vec![4, 3];
        let err = SfneModel::build(&bad_init, 0).unwrap_err().to_string();
        assert!(err.contains("init_bwd_c"), "{err}");

        let mut bad_readout = tiny_arch(LossKind::PlainMSE);
        *bad_readout.readout.acts.last_mut().unwrap() = Activation::Tanh;
        assert!(SfneModel::build(&bad_readout, 0).is_err());

        let mut bad_width = tiny_arch(LossKind::PlainMSE);
        bad_width.output_width = 9;
        assert!(SfneModel::build(&bad_width, 0).is_err());

        let mut conv_on_flat = tiny_arch(LossKind::PlainMSE);
        conv_on_flat.static_encoder = StaticEncoder::Conv(vec![ConvLayerSpec::Conv {
            out_channels: 2,
            kernel: 2,
            stride: 1,
        }]);
        assert!(SfneModel::build(&conv_on_flat, 0).is_err());

        let mut odd_weighted = tiny_arch(LossKind::WeightedRange);
        odd_weighted.output_width = 9;
        odd_weighted.readout.widths = vec![4, 9];
        assert!(SfneModel::build(&odd_weighted, 0).is_err());
    }

    #[test]
    fn forward_shapes_determinism_and_norm_bound() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let model = SfneModel::build(&arch, 3).unwrap();
        let in_static = vec![0.3; 10];
        let in_dyn = Tensor::new(vec![3, 1], vec![0.5, -0.25, 1.0]).unwrap();
        let a = model.forward(&in_static, &in_dyn).unwrap();
        let b = model.forward(&in_static, &in_dyn).unwrap();
        assert_eq!(a.shape(), &[3, 10]);
        assert_eq!(a.data(), b.data(), "inference must be bitwise repeatable");

        let single = model
            .forward(&in_static, &Tensor::new(vec![1, 1], vec![0.7]).unwrap())
            .unwrap();
        assert_eq!(single.shape(), &[1, 10]);

        // The readout's penultimate activation is tanh, so |out_j| is bounded
        // by the final layer's column L1 norm plus its bias.
        let w = model.params.value(model.params.find("readout.1.w").unwrap());
        let bias = model.params.value(model.params.find("readout.1.b").unwrap());
        let (rows, cols) = w.dim2().unwrap();
        for j in 0..cols {
            let bound: f64 = (0..rows).map(|i| w.at2(i, j).abs()).sum::<f64>()
                + bias.data()[j].abs();
            for t in 0..3 {
                assert!(a.at2(t, j).is_finite());
                assert!(a.at2(t, j).abs() <= bound + 1e-12, "column {j}");
            }
        }

        let empty = Tensor::new(vec![0, 1], vec![]).unwrap();
        assert!(model.forward(&in_static, &empty).is_err());
    }

    #[test]
    fn static_input_pathway_is_live() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let mut model = SfneModel::build(&arch, 11).unwrap();
        let in_dyn = Tensor::new(vec![3, 1], vec![0.2, 0.4, -0.1]).unwrap();
        let zeros = vec![0.0; 10];
        let mut nudged = zeros.clone();
        nudged[4] = 0.5;
        let base = model.forward(&zeros, &in_dyn).unwrap();
        let moved = model.forward(&nudged, &in_dyn).unwrap();
        assert_ne!(base.data(), moved.data(), "static input must reach the output");

        // All-zero static input still produces bias-driven initial states:
        // perturbing an initializer bias changes the prediction.
        let id = model.params.find("init_fwd_h.head.0.b").unwrap();
        model.params.value_mut(id).data_mut()[0] += 0.25;
        let shifted = model.forward(&zeros, &in_dyn).unwrap();
        assert_ne!(base.data(), shifted.data(), "initializer path must be live at 0");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for loss in [LossKind::PlainMSE, LossKind::WeightedRange] {
            let arch = tiny_conv_arch(loss);
            let model = SfneModel::build(&arch, 5).unwrap();
            let samples = toy_samples(&arch, 2, 3, 99);
            let idx = [0usize, 1];
            let batch = assemble_batch(&samples, &idx, &arch, true).unwrap();

            let eval = |vals: &ParamSet| -> f64 {
                let mut tape = Tape::new();
                let bound = vals.bind(&mut tape);
                let statics = tape.constant(batch.statics.clone());
                let steps: Vec<Var> = batch
                    .steps
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect();
                let preds = model
                    .blocks
                    .forward(&mut tape, &bound, &arch, statics, &steps, Phase::Infer, None)
                    .unwrap();
                let root = model.blocks.loss(&mut tape, &bound, &preds, &batch).unwrap();
                tape.value(root).item().unwrap()
            };

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let statics = tape.constant(batch.statics.clone());
            let steps: Vec<Var> = batch
                .steps
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            let preds = model
                .blocks
                .forward(&mut tape, &bound, &arch, statics, &steps, Phase::Infer, None)
                .unwrap();
            let root = model.blocks.loss(&mut tape, &bound, &preds, &batch).unwrap();
            let mut grads = tape.backward(root).unwrap();

            for idx in 0..model.params.len() {
                let id = ParamId(idx);
                let name = model.params.name(id).to_string();
                let analytic = grads
                    .take(bound.var(id))
                    .unwrap_or_else(|| Tensor::zeros(model.params.value(id).shape()));
                let base = model.params.value(id).clone();
                let fd = central_diff(base.data(), 1e-6, |vals| {
                    let mut probe = model.params.clone();
                    probe.value_mut(id).data_mut().copy_from_slice(vals);
                    eval(&probe)
                });
                assert!(
                    max_rel_err(analytic.data(), &fd) < 1e-4,
                    "{loss:?} gradient mismatch at `{name}`"
                );
            }
        }
    }

    #[test]
    fn weighted_loss_with_unit_and_zero_weights_reduces_to_plain_mse() {
        let plain_arch = tiny_arch(LossKind::PlainMSE);
        let weighted_arch = tiny_arch(LossKind::WeightedRange);
        // Identical seeds build identical network weights; the weighted model
        // merely appends the two loss weights to the registry.
        let plain = SfneModel::build(&plain_arch, 21).unwrap();
        let mut weighted = SfneModel::build(&weighted_arch, 21).unwrap();
        let w2 = weighted.blocks.w2.unwrap();
        weighted.params.value_mut(w2).data_mut()[0] = 0.0;

        let samples = toy_samples(&plain_arch, 6, 3, 5);
        let a = evaluate_loss(&plain, &samples, 4).unwrap();
        let b = evaluate_loss(&weighted, &samples, 4).unwrap();
        assert_eq!(a, b, "𝒲₁=1, 𝒲₂=0 must reproduce the plain objective exactly");
    }

    #[test]
    fn weighted_loss_range_normalization_is_scale_invariant() {
        let truth = Tensor::new(
            vec![3, 2],
            vec![0.1, -1.0, 0.4, 2.0, -0.3, 0.5],
        )
        .unwrap();
        let pred = Tensor::new(
            vec![3, 2],
            vec![0.2, -0.7, 0.1, 2.2, -0.4, 0.8],
        )
        .unwrap();
        let base_w1 = weighted_range_loss(&pred, &truth, 1.0, 0.0).unwrap();
        let base_w2 = weighted_range_loss(&pred, &truth, 0.0, 1.0).unwrap();
        let pred10 = pred.map(|v| v * 10.0);
        let truth10 = truth.map(|v| v * 10.0);
        let scaled_w1 = weighted_range_loss(&pred10, &truth10, 1.0, 0.0).unwrap();
        let scaled_w2 = weighted_range_loss(&pred10, &truth10, 0.0, 1.0).unwrap();
        assert!((scaled_w1 - 100.0 * base_w1).abs() < 1e-12 * scaled_w1.abs());
        assert!((scaled_w2 - base_w2).abs() < 1e-12 * base_w2.abs());

        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(weighted_range_loss(&truth, &truth, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(
            weighted_range_loss(&pred, &truth, 1.0, 0.0).unwrap(),
            mse(&pred, &truth).unwrap()
        );
        assert_eq!(
            loss_value(LossKind::PlainMSE, &pred, &truth, (3.0, 4.0)).unwrap(),
            mse(&pred, &truth).unwrap()
        );
    }

    #[test]
    fn weighted_loss_rejects_constant_truth_channels() {
        let truth = Tensor::new(vec![2, 2], vec![1.0, 0.3, 1.0, 0.4]).unwrap();
        let pred = Tensor::zeros(&[2, 2]);
        let err = weighted_range_loss(&pred, &truth, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");

        // Same refusal through the batched training path.
        let arch = tiny_arch(LossKind::WeightedRange);
        let mut model = SfneModel::build(&arch, 2).unwrap();
        let mut samples = toy_samples(&arch, 2, 3, 1);
        let flat_out = Tensor::filled(&[3, 10], 0.25);
        samples[0].out = flat_out;
        let err = train(&mut model, &samples, &[], &quick_cfg(1, 1e-3)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn relative_error_matches_definition() {
        let truth = Tensor::new(vec![2, 2], vec![0.0, 6.25, 1.0, 2.5]).unwrap();
        assert_eq!(relative_error(&truth, &truth).unwrap(), 0.0);

        // Offset each entry by 1% of the span (6.25): the metric is exactly 1.
        let pred = truth.map(|v| v + 0.0625);
        assert_eq!(relative_error(&pred, &truth).unwrap(), 1.0);

        let constant = Tensor::filled(&[2, 2], 3.0);
        assert!(relative_error(&truth, &constant).is_err());

        // Grouped variant: each column block normalized by its own span.
        // u column: one error of 0.01 over 2 entries, span 1 → 0.5%.
        // v column: one error of 1.0 over 2 entries, span 100 → 0.5%.
        let truth2 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 100.0]).unwrap();
        let mut pred2 = truth2.clone();
        pred2.data_mut()[0] += 0.01;
        pred2.data_mut()[1] += 1.0;
        let grouped = relative_error_grouped(&pred2, &truth2, 2).unwrap();
        assert!((grouped - 0.5).abs() < 1e-12, "got {grouped}");
        // Globally the v span (100) normalizes everything instead.
        let global = relative_error(&pred2, &truth2).unwrap();
        assert!((global - 0.2525).abs() < 1e-12, "got {global}");
    }

    #[test]
    fn one_epoch_improves_toy_loss_for_most_seeds() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let mut improved = 0;
        for seed in 0..10 {
            let mut model = SfneModel::build(&arch, seed).unwrap();
            let samples = toy_samples(&arch, 10, 3, seed + 100);
            let curves = train(&mut model, &samples, &[], &quick_cfg(2, 1e-2)).unwrap();
            if curves[1].train_loss < curves[0].train_loss {
                improved += 1;
            }
        }
        assert!(improved >= 9, "loss decreased for only {improved}/10 seeds");
    }

    #[test]
    fn learning_rate_follows_step_decay() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let mut model = SfneModel::build(&arch, 1).unwrap();
        let samples = toy_samples(&arch, 4, 3, 0);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr0: 8e-3,
            schedule: LrSchedule::StepDecay { period: 1, factor: 2.0 },
            split_fraction: 0.85,
        };
        let curves = train(&mut model, &samples, &samples, &cfg).unwrap();
        let lrs: Vec<f64> = curves.iter().map(|c| c.lr).collect();
        assert_eq!(lrs, vec![8e-3, 4e-3, 2e-3]);
        assert!(curves.iter().all(|c| c.test_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let arch = tiny_arch(LossKind::WeightedRange);
        let samples = toy_samples(&arch, 8, 3, 42);
        let run = |seed| {
            let mut m = SfneModel::build(&arch, seed).unwrap();
            let c = train(&mut m, &samples, &samples, &quick_cfg(3, 5e-3)).unwrap();
            (m, c)
        };
        let (ma, ca) = run(9);
        let (mb, cb) = run(9);
        let (mc, cc) = run(10);
        assert_eq!(ca, cb);
        for ((_, ta), (_, tb)) in ma.params.iter().zip(mb.params.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        assert!(cc != ca || mc.params.values()[0].data() != ma.params.values()[0].data());
    }

    #[test]
    fn diverged_loss_aborts_with_epoch_and_batch() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let mut model = SfneModel::build(&arch, 0).unwrap();
        let mut samples = toy_samples(&arch, 2, 3, 0);
        // A target this large overflows the squared error to infinity.
        samples[1].out = Tensor::filled(&[3, 10], 1e200);
        let err = train(&mut model, &samples, &[], &quick_cfg(1, 1e-3)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)), "{msg}");
        assert!(msg.contains("epoch 0"), "{msg}");
        assert!(msg.contains("batch 0"), "{msg}");
    }

    #[test]
    fn ascent_drives_loss_weights_up_within_bounds() {
        let arch = tiny_arch(LossKind::WeightedRange);
        let mut model = SfneModel::build(&arch, 13).unwrap();
        assert_eq!(model.loss_weights(), Some((1.0, 1.0)));
        let samples = toy_samples(&arch, 6, 3, 3);
        train(&mut model, &samples, &[], &quick_cfg(5, 5e-2)).unwrap();
        let (w1, w2) = model.loss_weights().unwrap();
        // Both loss terms are positive, so their weights must climb — and
        // never leave the clamp box.
        assert!(w1 > 1.0 && w2 > 1.0, "weights did not rise: {w1}, {w2}");
        assert!((0.1..=10.0).contains(&w1) && (0.1..=10.0).contains(&w2));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_conv_arch(LossKind::WeightedRange);
        let mut model = SfneModel::build(&arch, 31).unwrap();
        let samples = toy_samples(&arch, 6, 3, 8);
        train(&mut model, &samples, &samples, &quick_cfg(2, 1e-3)).unwrap();

        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = SfneModel::load(&path).unwrap();
        assert_eq!(loaded.seed(), model.seed());
        assert_eq!(loaded.epochs_done(), 2);
        for ((na, ta), (nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        let again = dir.path().join("again.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(&again).unwrap(),
            "save → load → save must be byte-identical"
        );

        // An untrained model round-trips too (no optimizer section).
        let fresh = SfneModel::build(&arch, 77).unwrap();
        let p2 = dir.path().join("fresh.ckpt");
        fresh.save(&p2).unwrap();
        let fresh2 = SfneModel::load(&p2).unwrap();
        let probe = &samples[0];
        assert_eq!(
            fresh.forward(&probe.in_static, &probe.in_dyn).unwrap().data(),
            fresh2.forward(&probe.in_static, &probe.in_dyn).unwrap().data()
        );
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch(LossKind::PlainMSE);
        let samples = toy_samples(&arch, 8, 3, 77);
        let cfg_full = quick_cfg(4, 2e-3);

        let mut straight = SfneModel::build(&arch, 55).unwrap();
        let curves_full = train(&mut straight, &samples, &samples, &cfg_full).unwrap();

        let mut paused = SfneModel::build(&arch, 55).unwrap();
        let head = train(&mut paused, &samples, &samples, &quick_cfg(2, 2e-3)).unwrap();
        let path = dir.path().join("pause.ckpt");
        paused.save(&path).unwrap();
        let mut resumed = SfneModel::load(&path).unwrap();
        assert_eq!(resumed.epochs_done(), 2);
        let tail = train(&mut resumed, &samples, &samples, &cfg_full).unwrap();

        assert_eq!(head.len() + tail.len(), curves_full.len());
        assert_eq!(&curves_full[..2], &head[..]);
        assert_eq!(&curves_full[2..], &tail[..]);

        let a = dir.path().join("straight.ckpt");
        let b = dir.path().join("resumed.ckpt");
        straight.save(&a).unwrap();
        resumed.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        // Resuming with different settings is refused.
        let mut other = SfneModel::load(&path).unwrap();
        let err = train(&mut other, &samples, &samples, &quick_cfg(4, 9e-3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    /// Rewrites one manifest line of a checkpoint, keeping the binary blob.
    fn rewrite_manifest(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let sep = b"\n---\n";
        let pos = bytes.windows(sep.len()).position(|w| w == sep).unwrap();
        let manifest = std::str::from_utf8(&bytes[..pos + 1]).unwrap();
        let mut out = manifest.replacen(from, to, 1).into_bytes();
        out.extend_from_slice(&bytes[pos + 1..]);
        out
    }

    #[test]
    fn corrupted_checkpoints_are_rejected_by_kind() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch(LossKind::PlainMSE);
        let model = SfneModel::build(&arch, 4).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let original = fs::read(&path).unwrap();

        let bumped = rewrite_manifest(&original, "format_version: 1", "format_version: 9");
        fs::write(&path, &bumped).unwrap();
        assert!(matches!(
            SfneModel::load(&path).unwrap_err(),
            Error::FormatVersion { .. }
        ));

        let mut flipped = original.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            SfneModel::load(&path).unwrap_err(),
            Error::Checksum { .. }
        ));

        let truncated = &original[..original.len() - 16];
        fs::write(&path, truncated).unwrap();
        assert!(matches!(
            SfneModel::load(&path).unwrap_err(),
            Error::Truncated { .. }
        ));

        let garbled = rewrite_manifest(&original, "tensor: ", "tensro: ");
        fs::write(&path, &garbled).unwrap();
        assert!(matches!(
            SfneModel::load(&path).unwrap_err(),
            Error::Manifest { .. }
        ));
    }

    #[test]
    fn singleton_ensemble_equals_its_member() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let samples = toy_samples(&arch, 8, 3, 2);
        let (train_set, test_set) = samples.split_at(6);
        let factory = |_i: usize, _seed: u64| Ok((train_set.to_vec(), test_set.to_vec()));
        let (ens, curves) =
            train_ensemble(&arch, factory, 1, &quick_cfg(2, 1e-3), 123).unwrap();
        assert_eq!(ens.members.len(), 1);
        assert_eq!(curves.len(), 1);
        let probe = &test_set[0];
        let single = ens.members[0].forward(&probe.in_static, &probe.in_dyn).unwrap();
        let pooled = ens.forward(&probe.in_static, &probe.in_dyn).unwrap();
        assert_eq!(single.data(), pooled.data());
    }

    #[test]
    fn ensemble_of_identical_members_predicts_like_one() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch(LossKind::PlainMSE);
        let model = SfneModel::build(&arch, 19).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let twins = vec![SfneModel::load(&path).unwrap(), SfneModel::load(&path).unwrap()];
        let ens = Ensemble::new(twins).unwrap();
        let in_dyn = Tensor::new(vec![3, 1], vec![0.1, 0.2, 0.3]).unwrap();
        let statics = vec![0.5; 10];
        let one = model.forward(&statics, &in_dyn).unwrap();
        let avg = ens.forward(&statics, &in_dyn).unwrap();
        assert_eq!(one.data(), avg.data());
    }

    #[test]
    fn ensemble_failure_reports_survivors() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let samples = toy_samples(&arch, 6, 3, 4);
        let factory = |i: usize, _seed: u64| {
            if i == 1 {
                Err(Error::Config("synthetic data failure".into()))
            } else {
                Ok((samples.clone(), Vec::new()))
            }
        };
        let err = train_ensemble(&arch, factory, 3, &quick_cfg(1, 1e-3), 7).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)), "{msg}");
        assert!(msg.contains("member 1"), "{msg}");
        assert!(msg.contains("[0, 2]"), "{msg}");
    }

    #[test]
    fn ensemble_members_use_distinct_seeds_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch(LossKind::PlainMSE);
        let samples = toy_samples(&arch, 6, 3, 4);
        let factory = |_i: usize, seed: u64| {
            let mut s = samples.clone();
            // Rotate so members see differently ordered bags.
            s.rotate_left((seed % 3) as usize);
            Ok((s, Vec::new()))
        };
        let (ens, _) = train_ensemble(&arch, factory, 2, &quick_cfg(1, 1e-3), 500).unwrap();
        assert_ne!(ens.members[0].seed(), ens.members[1].seed());
        let differ = ens.members[0]
            .params
            .iter()
            .zip(ens.members[1].params.iter())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(differ);

        ens.save(dir.path()).unwrap();
        let back = Ensemble::load(dir.path()).unwrap();
        assert_eq!(back.members.len(), 2);
        let probe = &samples[0];
        assert_eq!(
            ens.forward(&probe.in_static, &probe.in_dyn).unwrap().data(),
            back.forward(&probe.in_static, &probe.in_dyn).unwrap().data()
        );
    }

    #[test]
    fn on_demand_forward_checks_the_query_location() {
        use Activation::*;
        let mut arch = tiny_arch(LossKind::PlainMSE);
        arch.in_static = StaticShape::Flat { width: 3 };
        arch.readout = block(&[4, 2], &[Tanh, Linear]);
        arch.output_width = 2;
        let model = SfneModel::build(&arch, 6).unwrap();
        let in_dyn = Tensor::new(vec![3, 1], vec![0.3, 0.1, -0.2]).unwrap();

        let ok = model.on_demand_forward(&[0.1, 0.2, 0.4], &in_dyn, 1.0).unwrap();
        assert_eq!(ok.shape(), &[3, 2]);
        let err = model.on_demand_forward(&[0.1, 0.2, 1.4], &in_dyn, 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(model.on_demand_forward(&[0.1, 0.2, -0.1], &in_dyn, 1.0).is_err());

        // A ten-column model cannot answer single-location queries.
        let wide = SfneModel::build(&tiny_arch(LossKind::PlainMSE), 6).unwrap();
        assert!(wide
            .on_demand_forward(&[0.0; 10], &in_dyn, 1.0)
            .is_err());
    }

    #[test]
    fn predict_all_matches_per_sample_forward() {
        let arch = tiny_arch(LossKind::PlainMSE);
        let model = SfneModel::build(&arch, 23).unwrap();
        let samples = toy_samples(&arch, 5, 3, 17);
        let batched = model.predict_all(&samples, 2).unwrap();
        for (s, b) in samples.iter().zip(&batched) {
            let single = model.forward(&s.in_static, &s.in_dyn).unwrap();
            assert_eq!(single.data(), b.data());
        }
        let errs = model.relative_errors(&samples, 2, 4).unwrap();
        assert_eq!(errs.len(), 5);
        assert!(errs.iter().all(|&e| e >= 0.0));
        let mean = model.mean_relative_error(&samples, 2, 4).unwrap();
        let by_hand = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((mean - by_hand).abs() < 1e-12);
    }
}
