//! Training samples: a static input, a per-step dynamic input history, and the
//! target output history.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One supervised sample.
///
/// `in_static` is the flat constant input (initial state, property vectors,
/// query location, ... — the consumer's architecture defines the layout).
/// `in_dyn` is the `[steps, dyn_width]` per-step input and `out` the
/// `[steps, out_width]` target, row `i` of both belonging to the same step.
/// `meta` carries bookkeeping values; by convention `meta[0]` is the load
/// angular frequency and `meta[1]` the absolute start time of the window,
/// with any extra entries defined by the dataset that produced the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub in_static: Vec<f64>,
    pub in_dyn: Tensor,
    pub out: Tensor,
    pub meta: Vec<f64>,
}

impl Sample {
    pub fn new(in_static: Vec<f64>, in_dyn: Tensor, out: Tensor, meta: Vec<f64>) -> Result<Self> {
        if in_dyn.rows()? != out.rows()? {
            return Err(Error::ShapeMismatch {
                op: "sample",
                detail: format!(
                    "dynamic input has {} steps but output has {}",
                    in_dyn.rows()?,
                    out.rows()?
                ),
            });
        }
        let all = in_static.iter().chain(in_dyn.data()).chain(out.data());
        if all.clone().any(|v| !v.is_finite()) || meta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample contents".into()));
        }
        Ok(Self { in_static, in_dyn, out, meta })
    }

    /// Number of time steps covered by the window.
    pub fn steps(&self) -> usize {
        self.in_dyn.shape()[0]
    }
}
