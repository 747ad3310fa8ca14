use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Learning-rate schedule applied at the end of each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Divide the rate by `factor` every `period` epochs.
    StepDecay { period: usize, factor: f64 },
    /// Divide by `factor` after `patience` epochs without loss improvement;
    /// any improvement resets the wait counter.
    Plateau { patience: usize, factor: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, plus the epoch-level schedule. Slots flagged
/// for ascent in the `ParamSet` are driven uphill (their gradient is
/// negated) and clamped to their box after each step.
#[derive(Clone)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    pub schedule: LrSchedule,
    lr: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    plateau_best: f64,
    plateau_wait: usize,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig, schedule: LrSchedule, params: &ParamSet) -> Self {
        Optimizer {
            cfg,
            schedule,
            lr: cfg.lr0,
            step_count: 0,
            m: params.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            plateau_best: f64::INFINITY,
            plateau_wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from per-slot gradients (`None` = zero gradient). Rejects
    /// non-finite gradients, naming the parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for idx in 0..params.len() {
            let g = match &grads[idx] {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                let name = params.iter().nth(idx).map(|(n, _)| n.to_string()).unwrap_or_default();
                return Err(Error::NonFinite(format!("gradient of `{}`", name)));
            }
            let sign = if params.is_ascent(idx) { -1.0 } else { 1.0 };
            let bound = params.bound(idx);
            let mt = &mut self.m[idx];
            let vt = &mut self.v[idx];
            let value = &mut params.values_mut()[idx];
            let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.lr);
            for ((w, gi), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mt.data_mut().iter_mut().zip(vt.data_mut().iter_mut()))
            {
                let gs = sign * gi;
                *mi = b1 * *mi + (1.0 - b1) * gs;
                *vi = b2 * *vi + (1.0 - b2) * gs * gs;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                if let Some((lo, hi)) = bound {
                    *w = w.clamp(lo, hi);
                }
            }
        }
        Ok(())
    }

    /// Applies the schedule once the epoch's loss is known. `epoch` is the
    /// zero-based index of the epoch that just finished.
    pub fn end_epoch(&mut self, epoch: usize, loss: f64) {
        match self.schedule {
            LrSchedule::Constant => {}
            LrSchedule::StepDecay { period, factor } => {
                let k = ((epoch + 1) / period) as i32;
                self.lr = self.cfg.lr0 / factor.powi(k);
            }
            LrSchedule::Plateau { patience, factor } => {
                if loss < self.plateau_best {
                    self.plateau_best = loss;
                    self.plateau_wait = 0;
                } else {
                    self.plateau_wait += 1;
                    if self.plateau_wait >= patience {
                        self.lr /= factor;
                        self.plateau_wait = 0;
                    }
                }
            }
        }
    }

    /// Opaque scalar state for checkpointing, paired with `restore_state`.
    pub fn state_scalars(&self) -> Vec<(String, f64)> {
        vec![
            ("step_count".into(), self.step_count as f64),
            ("lr".into(), self.lr),
            ("plateau_best".into(), self.plateau_best),
            ("plateau_wait".into(), self.plateau_wait as f64),
        ]
    }

    pub fn moment_tensors(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(
        &mut self,
        scalars: &[(String, f64)],
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Config(
                "optimizer moment count does not match the parameter set".into(),
            ));
        }
        for (name, val) in scalars {
            match name.as_str() {
                "step_count" => self.step_count = *val as u64,
                "lr" => self.lr = *val,
                "plateau_best" => self.plateau_best = *val,
                "plateau_wait" => self.plateau_wait = *val as usize,
                other => return Err(Error::Config(format!("unknown optimizer scalar `{}`", other))),
            }
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}
