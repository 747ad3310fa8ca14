//! Named experiment configurations.
//!
//! A [`Preset`] bundles everything one run needs: the physical problem, how
//! many sources to draw and how, the optional windowing/per-location stages,
//! the network architecture, and the training schedule. `desk-*` presets are
//! sized to train on a single core in minutes; `paper-*` presets are the
//! full-scale counterparts with the published layer widths and epoch counts.

use crate::dataset::{AugmentPlan, CaseId, DrawMode, DrawRanges, ProblemSpec};
use crate::error::{Error, Result};
use crate::nn::layers::standard_conv_stack;
use crate::nn::optim::LrSchedule;
use crate::nn::Activation;
use crate::sfne::{ArchSpec, BlockSpec, LossKind, StaticEncoder, StaticShape, TrainConfig};

/// One complete, reproducible experiment description.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    /// Case the generator draws (windowing may map it to another label).
    pub case: CaseId,
    pub problem: ProblemSpec,
    pub ranges: DrawRanges,
    pub draw_mode: DrawMode,
    /// Number of from-rest source trajectories to synthesize.
    pub source_count: usize,
    /// Re-windowing onto nonzero initial conditions, where the case uses it.
    pub augment: Option<AugmentPlan>,
    /// Explode each windowed rod sample into one sample per grid location.
    pub per_location: bool,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    /// Column groups for relative-error scoring (1 = displacement only,
    /// 2 = displacement and velocity halves).
    pub groups: usize,
    /// Default ensemble size for training and stitching.
    pub ensemble: usize,
}

impl Preset {
    /// Case label of the samples the model actually trains on, after the
    /// optional windowing and per-location stages.
    pub fn trained_case(&self) -> CaseId {
        if self.per_location {
            return CaseId::OnDemand;
        }
        match (self.case, &self.augment) {
            (CaseId::Case4, Some(_)) => CaseId::Case5,
            (case, _) => case,
        }
    }

    /// Whether trained models can be restarted from their own output, i.e.
    /// whether long-horizon stitching applies.
    pub fn supports_restart(&self) -> bool {
        matches!(
            self.trained_case(),
            CaseId::Case2 | CaseId::Case3 | CaseId::Case5
        )
    }

    /// Steps per training window: the augmentation window if one is
    /// configured, otherwise the full source grid.
    pub fn window_len(&self) -> usize {
        match &self.augment {
            Some(plan) => plan.window,
            None => self.problem.grid().n_t,
        }
    }

    /// Constant leading entries of the static input that describe the
    /// structure rather than the restartable state (the property channels of
    /// windowed beam samples). Stitching passes these through unchanged.
    pub fn static_prefix_len(&self) -> usize {
        match self.trained_case() {
            CaseId::Case5 => 2 * self.problem.grid().n_x,
            _ => 0,
        }
    }
}

fn block(widths: &[usize], acts: &[Activation]) -> BlockSpec {
    BlockSpec::new(widths.to_vec(), acts.to_vec())
}

/// `count` hidden layers of `width` with `act`, then a linear layer of
/// `out` — the shape every readout block takes.
fn readout(width: usize, count: usize, act: Activation, out: usize) -> BlockSpec {
    let mut widths = vec![width; count];
    let mut acts = vec![act; count];
    widths.push(out);
    acts.push(Activation::Linear);
    BlockSpec::new(widths, acts)
}

use Activation::{ESwish, Snake, Tanh};

/// Full-scale rod architecture; `in_static`/`output_width`/`n_t` vary by
/// case, every block is shared.
fn rod_paper_arch(n_t: usize, in_static: StaticShape, output_width: usize) -> ArchSpec {
    let init = block(&[20, 50], &[Tanh, ESwish]);
    ArchSpec {
        n_t,
        n_x: 51,
        in_dyn_width: 1,
        in_static,
        cells_per_direction: 50,
        init_fwd_h: init.clone(),
        init_fwd_c: init.clone(),
        init_bwd_h: init.clone(),
        init_bwd_c: init,
        step_net: block(&[20, 60, 60, 60], &[Tanh, ESwish, ESwish, ESwish]),
        readout: {
            let widths = vec![50, 60, 60, 60, 60, 60, 60, output_width];
            let mut acts = vec![ESwish; 7];
            acts.push(Activation::Linear);
            BlockSpec::new(widths, acts)
        },
        static_encoder: StaticEncoder::None,
        output_width,
        loss: LossKind::PlainMSE,
    }
}

/// Full-scale beam architecture (convolutional static encoder, snake
/// readout); `in_static`/`n_t` vary by case.
fn beam_paper_arch(n_t: usize, in_static: StaticShape) -> ArchSpec {
    let init = block(&[100, 100], &[Tanh, ESwish]);
    ArchSpec {
        n_t,
        n_x: 101,
        in_dyn_width: 1,
        in_static,
        cells_per_direction: 100,
        init_fwd_h: init.clone(),
        init_fwd_c: init.clone(),
        init_bwd_h: init.clone(),
        init_bwd_c: init,
        step_net: block(&[50, 150, 150, 150], &[Tanh, ESwish, ESwish, ESwish]),
        readout: readout(200, 7, Snake, 202),
        static_encoder: StaticEncoder::Conv(standard_conv_stack()),
        output_width: 202,
        loss: LossKind::WeightedRange,
    }
}

/// Desk-scale rod architecture used by the windowed cases.
fn rod_desk_windowed_arch(in_static_width: usize, output_width: usize) -> ArchSpec {
    let init = block(&[16, 16], &[Tanh, ESwish]);
    let readout_hidden = if output_width == 2 { 16 } else { 32 };
    ArchSpec {
        n_t: 100,
        n_x: 51,
        in_dyn_width: 1,
        in_static: StaticShape::Flat { width: in_static_width },
        cells_per_direction: 16,
        init_fwd_h: init.clone(),
        init_fwd_c: init.clone(),
        init_bwd_h: init.clone(),
        init_bwd_c: init,
        step_net: block(&[10, 24], &[Tanh, ESwish]),
        readout: readout(readout_hidden, 1, ESwish, output_width),
        static_encoder: StaticEncoder::None,
        output_width,
        loss: LossKind::PlainMSE,
    }
}

/// Desk-scale beam architecture; keeps the convolutional encoder and the
/// snake readout but narrows everything else.
fn beam_desk_arch(n_t: usize, in_static: StaticShape) -> ArchSpec {
    let init = block(&[32, 25], &[Tanh, ESwish]);
    ArchSpec {
        n_t,
        n_x: 101,
        in_dyn_width: 1,
        in_static,
        cells_per_direction: 25,
        init_fwd_h: init.clone(),
        init_fwd_c: init.clone(),
        init_bwd_h: init.clone(),
        init_bwd_c: init,
        step_net: block(&[16, 40], &[Tanh, ESwish]),
        readout: readout(64, 1, Snake, 202),
        static_encoder: StaticEncoder::Conv(standard_conv_stack()),
        output_width: 202,
        loss: LossKind::WeightedRange,
    }
}

fn desk_rod_train(epochs: usize, period: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        lr0: 1e-3,
        schedule: LrSchedule::StepDecay { period, factor: 2.0 },
        split_fraction: 0.85,
    }
}

fn desk_beam_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        lr0: 2e-4,
        schedule: LrSchedule::Plateau { patience: 15, factor: 2.0 },
        split_fraction: 0.85,
    }
}

const NAMES: [&str; 13] = [
    "desk-case1",
    "desk-case2",
    "desk-case3",
    "desk-case4",
    "desk-case5",
    "desk-ondemand",
    "micro-case2",
    "micro-case4",
    "paper-case1",
    "paper-case2",
    "paper-case3",
    "paper-case4",
    "paper-case5",
];

/// Every preset name, in the order `resolve` lists them.
pub fn names() -> &'static [&'static str] {
    &NAMES
}

/// Looks a preset up by name.
pub fn resolve(name: &str) -> Result<Preset> {
    let preset = match name {
        "desk-case1" => Preset {
            name: "desk-case1",
            case: CaseId::Case1,
            problem: ProblemSpec::rod_end_load(51, 100, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 2000,
            augment: None,
            per_location: false,
            arch: ArchSpec {
                n_t: 100,
                n_x: 51,
                in_dyn_width: 1,
                in_static: StaticShape::Flat { width: 1 },
                cells_per_direction: 25,
                init_fwd_h: block(&[10, 25], &[Tanh, ESwish]),
                init_fwd_c: block(&[10, 25], &[Tanh, ESwish]),
                init_bwd_h: block(&[10, 25], &[Tanh, ESwish]),
                init_bwd_c: block(&[10, 25], &[Tanh, ESwish]),
                step_net: block(&[10, 30], &[Tanh, ESwish]),
                readout: readout(40, 1, ESwish, 51),
                static_encoder: StaticEncoder::None,
                output_width: 51,
                loss: LossKind::PlainMSE,
            },
            train: desk_rod_train(200, 60),
            groups: 1,
            ensemble: 1,
        },
        "desk-case2" => Preset {
            name: "desk-case2",
            case: CaseId::Case2,
            problem: ProblemSpec::rod_end_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 500,
            augment: Some(AugmentPlan { windows_per_source: 4, window: 100, t_start: (0, 400) }),
            per_location: false,
            arch: rod_desk_windowed_arch(102, 102),
            train: desk_rod_train(100, 30),
            groups: 2,
            ensemble: 3,
        },
        "desk-case3" => Preset {
            name: "desk-case3",
            case: CaseId::Case3,
            problem: ProblemSpec::rod_spring_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 500,
            augment: Some(AugmentPlan { windows_per_source: 4, window: 100, t_start: (0, 400) }),
            per_location: false,
            arch: rod_desk_windowed_arch(102, 102),
            train: desk_rod_train(100, 30),
            groups: 2,
            ensemble: 3,
        },
        "desk-case4" => Preset {
            name: "desk-case4",
            case: CaseId::Case4,
            problem: ProblemSpec::beam_distributed(101, 400, 100),
            ranges: DrawRanges::beam(0.5),
            draw_mode: DrawMode::Lhs,
            source_count: 500,
            augment: None,
            per_location: false,
            arch: beam_desk_arch(400, StaticShape::Channels { channels: 2, length: 101 }),
            train: desk_beam_train(150),
            groups: 2,
            ensemble: 1,
        },
        "desk-case5" => Preset {
            name: "desk-case5",
            case: CaseId::Case4,
            problem: ProblemSpec::beam_distributed(101, 400, 100),
            ranges: DrawRanges::beam(0.5),
            draw_mode: DrawMode::Lhs,
            source_count: 250,
            augment: Some(AugmentPlan { windows_per_source: 2, window: 100, t_start: (1, 299) }),
            per_location: false,
            arch: beam_desk_arch(100, StaticShape::Channels { channels: 4, length: 101 }),
            train: desk_beam_train(150),
            groups: 2,
            ensemble: 1,
        },
        "desk-ondemand" => Preset {
            name: "desk-ondemand",
            case: CaseId::Case3,
            problem: ProblemSpec::rod_spring_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 60,
            augment: Some(AugmentPlan::rod_standard()),
            per_location: true,
            arch: rod_desk_windowed_arch(103, 2),
            train: desk_rod_train(60, 20),
            groups: 2,
            ensemble: 3,
        },
        // Smoke-scale configurations: seconds-long end-to-end pipeline runs
        // for CI checks and first contact, not for accuracy.
        "micro-case2" => Preset {
            name: "micro-case2",
            case: CaseId::Case2,
            problem: ProblemSpec::rod_end_load(51, 200, 60),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 40,
            augment: Some(AugmentPlan { windows_per_source: 2, window: 40, t_start: (0, 160) }),
            per_location: false,
            arch: ArchSpec {
                n_t: 40,
                n_x: 51,
                in_dyn_width: 1,
                in_static: StaticShape::Flat { width: 102 },
                cells_per_direction: 8,
                init_fwd_h: block(&[8, 8], &[Tanh, ESwish]),
                init_fwd_c: block(&[8, 8], &[Tanh, ESwish]),
                init_bwd_h: block(&[8, 8], &[Tanh, ESwish]),
                init_bwd_c: block(&[8, 8], &[Tanh, ESwish]),
                step_net: block(&[6, 12], &[Tanh, ESwish]),
                readout: readout(16, 1, ESwish, 102),
                static_encoder: StaticEncoder::None,
                output_width: 102,
                loss: LossKind::PlainMSE,
            },
            train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                lr0: 1e-3,
                schedule: LrSchedule::StepDecay { period: 4, factor: 2.0 },
                split_fraction: 0.85,
            },
            groups: 2,
            ensemble: 2,
        },
        "micro-case4" => Preset {
            name: "micro-case4",
            case: CaseId::Case4,
            problem: ProblemSpec::beam_distributed(101, 80, 40),
            ranges: DrawRanges::beam(0.5),
            draw_mode: DrawMode::Lhs,
            source_count: 16,
            augment: None,
            per_location: false,
            arch: ArchSpec {
                n_t: 80,
                n_x: 101,
                in_dyn_width: 1,
                in_static: StaticShape::Channels { channels: 2, length: 101 },
                cells_per_direction: 8,
                init_fwd_h: block(&[16, 8], &[Tanh, ESwish]),
                init_fwd_c: block(&[16, 8], &[Tanh, ESwish]),
                init_bwd_h: block(&[16, 8], &[Tanh, ESwish]),
                init_bwd_c: block(&[16, 8], &[Tanh, ESwish]),
                step_net: block(&[8, 12], &[Tanh, ESwish]),
                readout: readout(16, 1, Snake, 202),
                static_encoder: StaticEncoder::Conv(standard_conv_stack()),
                output_width: 202,
                loss: LossKind::WeightedRange,
            },
            train: TrainConfig {
                epochs: 6,
                batch_size: 8,
                lr0: 2e-4,
                schedule: LrSchedule::Plateau { patience: 3, factor: 2.0 },
                split_fraction: 0.85,
            },
            groups: 2,
            ensemble: 1,
        },
        "paper-case1" => Preset {
            name: "paper-case1",
            case: CaseId::Case1,
            problem: ProblemSpec::rod_end_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 60_000,
            augment: None,
            per_location: false,
            arch: rod_paper_arch(500, StaticShape::Flat { width: 1 }, 51),
            train: TrainConfig::rod_default(),
            groups: 1,
            ensemble: 1,
        },
        "paper-case2" => Preset {
            name: "paper-case2",
            case: CaseId::Case2,
            problem: ProblemSpec::rod_end_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 60_000,
            augment: Some(AugmentPlan::rod_standard()),
            per_location: false,
            arch: rod_paper_arch(100, StaticShape::Flat { width: 102 }, 102),
            train: TrainConfig::rod_default(),
            groups: 2,
            ensemble: 3,
        },
        "paper-case3" => Preset {
            name: "paper-case3",
            case: CaseId::Case3,
            problem: ProblemSpec::rod_spring_load(51, 500, 200),
            ranges: DrawRanges::rod(),
            draw_mode: DrawMode::UniformRandom,
            source_count: 60_000,
            augment: Some(AugmentPlan::rod_standard()),
            per_location: false,
            arch: rod_paper_arch(100, StaticShape::Flat { width: 102 }, 102),
            train: TrainConfig::rod_default(),
            groups: 2,
            ensemble: 3,
        },
        "paper-case4" => Preset {
            name: "paper-case4",
            case: CaseId::Case4,
            problem: ProblemSpec::beam_distributed(101, 400, 100),
            ranges: DrawRanges::beam(0.5),
            draw_mode: DrawMode::Lhs,
            source_count: 10_000,
            augment: None,
            per_location: false,
            arch: beam_paper_arch(400, StaticShape::Channels { channels: 2, length: 101 }),
            train: TrainConfig::beam_default(),
            groups: 2,
            ensemble: 3,
        },
        "paper-case5" => Preset {
            name: "paper-case5",
            case: CaseId::Case4,
            problem: ProblemSpec::beam_distributed(101, 400, 100),
            ranges: DrawRanges::beam(0.5),
            draw_mode: DrawMode::Lhs,
            source_count: 10_000,
            augment: Some(AugmentPlan::beam_standard()),
            per_location: false,
            arch: beam_paper_arch(100, StaticShape::Channels { channels: 4, length: 101 }),
            train: TrainConfig::beam_default(),
            groups: 2,
            ensemble: 3,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; expected one of: {}",
                NAMES.join(", ")
            )))
        }
    };
    Ok(preset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfne::SfneModel;

    #[test]
    fn unknown_names_list_the_catalog() {
        let err = resolve("desk-case9").unwrap_err().to_string();
        assert!(err.contains("desk-case9"), "{err}");
        for name in names() {
            assert!(err.contains(name), "{err} missing {name}");
        }
    }

    #[test]
    fn every_preset_is_internally_consistent() {
        for name in names() {
            let p = resolve(name).unwrap();
            assert_eq!(p.name, *name);
            p.arch.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(p.ensemble >= 1 && p.source_count > 0, "{name}");
            assert_eq!(p.arch.n_t, p.window_len(), "{name}: window length");
            assert_eq!(p.arch.n_x, p.problem.grid().n_x, "{name}: node count");

            let n_x = p.problem.grid().n_x;
            let (want_static, want_out, want_groups) = match p.trained_case() {
                CaseId::Case1 => (1, n_x, 1),
                CaseId::Case2 | CaseId::Case3 => (2 * n_x, 2 * n_x, 2),
                CaseId::Case4 => (2 * n_x, 2 * n_x, 2),
                CaseId::Case5 => (4 * n_x, 2 * n_x, 2),
                CaseId::OnDemand => (2 * n_x + 1, 2, 2),
            };
            assert_eq!(p.arch.in_static.flat_width(), want_static, "{name}: static width");
            assert_eq!(p.arch.output_width, want_out, "{name}: output width");
            assert_eq!(p.groups, want_groups, "{name}: error groups");

            if let Some(plan) = &p.augment {
                let n_t = p.problem.grid().n_t;
                assert!(plan.t_start.1 + plan.window <= n_t, "{name}: window range");
            }
            match p.trained_case() {
                CaseId::Case5 => assert_eq!(p.static_prefix_len(), 2 * n_x, "{name}"),
                _ => assert_eq!(p.static_prefix_len(), 0, "{name}"),
            }
        }
    }

    #[test]
    fn restartable_cases_are_the_windowed_ones() {
        let by_restart: Vec<(&str, bool)> = names()
            .iter()
            .map(|n| (*n, resolve(n).unwrap().supports_restart()))
            .collect();
        let expected = [
            ("desk-case1", false),
            ("desk-case2", true),
            ("desk-case3", true),
            ("desk-case4", false),
            ("desk-case5", true),
            ("desk-ondemand", false),
            ("micro-case2", true),
            ("micro-case4", false),
            ("paper-case1", false),
            ("paper-case2", true),
            ("paper-case3", true),
            ("paper-case4", false),
            ("paper-case5", true),
        ];
        assert_eq!(by_restart, expected);
    }

    #[test]
    fn full_scale_rod_preset_matches_the_audited_parameter_count() {
        let p = resolve("paper-case1").unwrap();
        let model = SfneModel::build(&p.arch, 0).unwrap();
        assert_eq!(model.param_count(), 86_915);
    }

    #[test]
    fn desk_presets_build_and_run_one_window() {
        use crate::tensor::Tensor;
        for name in names().iter().filter(|n| n.starts_with("desk")) {
            let p = resolve(name).unwrap();
            let model = SfneModel::build(&p.arch, 7).unwrap_or_else(|e| panic!("{name}: {e}"));
            let statics = vec![0.1; p.arch.in_static.flat_width()];
            let in_dyn = Tensor::new(
                vec![p.arch.n_t, p.arch.in_dyn_width],
                vec![0.5; p.arch.n_t * p.arch.in_dyn_width],
            )
            .unwrap();
            let out = model.forward(&statics, &in_dyn).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(out.shape(), &[p.arch.n_t, p.arch.output_width], "{name}");
        }
    }
}
