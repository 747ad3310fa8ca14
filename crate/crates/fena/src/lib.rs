//! Fast surrogates for transient structural response.
//!
//! The crate has three legs:
//!
//! * ground truth — closed-form modal solutions for axially loaded rods
//!   ([`analytic`]) and a Hermite-element Newmark solver for variable-section
//!   beams ([`fem`]), plus independent finite-difference cross-checks in
//!   [`oracle`];
//! * a from-scratch neural core ([`nn`]): tensors, a reverse-mode tape,
//!   dense/conv/recurrent layers, Adam, and learning-rate schedules;
//! * the surrogate itself ([`sfne`]): a bidirectional recurrent network whose
//!   initial states are produced from static problem descriptors, trained on
//!   datasets built by [`dataset`] and stretched to long horizons by window
//!   concatenation ([`concat`]).
//!
//! Start with the `examples/` directory: each file is a runnable walkthrough
//! of one capability. The `fena` binary wraps the same entry points for
//! scripted use (`gen-data`, `train`, `eval`, `simulate`, `bench`).

pub mod analytic;
pub mod cli;
pub mod concat;
pub mod dataset;
pub mod error;
pub mod fem;
pub mod nn;
pub mod oracle;
pub mod presets;
pub mod quad;
pub mod sample;
pub mod sfne;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
