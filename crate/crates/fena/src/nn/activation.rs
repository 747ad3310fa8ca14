use crate::error::{Error, Result};
use crate::nn::params::{Bound, ParamId, ParamSet};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Layer activation. `ESwish` and `Snake` carry one trainable scalar per
/// layer instance: the swish gain, and the frequency of the periodic term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
    ESwish,
    Snake,
}

impl Activation {
    pub fn has_trainable_scalar(self) -> bool {
        matches!(self, Activation::ESwish | Activation::Snake)
    }

    /// Registers the layer's activation scalar, if this kind has one.
    /// The swish gain starts at 1; the snake frequency is stored as its
    /// logarithm (starting at ln 1 = 0) so that it stays positive under
    /// unconstrained updates.
    pub fn register_scalar(self, params: &mut ParamSet, layer_name: &str) -> Option<ParamId> {
        match self {
            Activation::ESwish => Some(params.add(
                format!("{}.eswish_beta", layer_name),
                Tensor::scalar(1.0),
            )),
            Activation::Snake => Some(params.add(
                format!("{}.snake_log_freq", layer_name),
                Tensor::scalar(0.0),
            )),
            _ => None,
        }
    }

    /// Applies the activation on the tape. Errors on non-finite input,
    /// naming the offending layer.
    pub fn apply(
        self,
        tape: &mut Tape,
        x: Var,
        scalar: Option<(&Bound, ParamId)>,
        layer_name: &str,
    ) -> Result<Var> {
        tape.check_finite(x, layer_name)?;
        match self {
            Activation::Linear => Ok(x),
            Activation::Tanh => Ok(tape.tanh(x)),
            Activation::ESwish => {
                let (bound, id) = scalar.ok_or_else(|| {
                    Error::Config(format!("{}: missing swish gain parameter", layer_name))
                })?;
                let beta = bound.var(id);
                let sig = tape.sigmoid(x);
                let swish = tape.mul(x, sig)?;
                tape.mul_scalar(swish, beta)
            }
            Activation::Snake => {
                let (bound, id) = scalar.ok_or_else(|| {
                    Error::Config(format!("{}: missing snake frequency parameter", layer_name))
                })?;
                let freq = tape.exp(bound.var(id));
                let scaled = tape.mul_scalar(x, freq)?;
                let wave = tape.sin(scaled);
                let inv_freq = tape.recip(freq);
                let periodic = tape.mul_scalar(wave, inv_freq)?;
                tape.add(x, periodic)
            }
        }
    }
}

/// Direct (tape-free) swish-with-gain, for reference checks: `β·x·σ(x)`.
pub fn eswish_value(x: f64, beta: f64) -> f64 {
    beta * x / (1.0 + (-x).exp())
}

/// Direct snake: `x + sin(a·x)/a`.
pub fn snake_value(x: f64, freq: f64) -> f64 {
    x + (freq * x).sin() / freq
}
