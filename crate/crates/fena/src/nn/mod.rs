//! From-scratch neural network core: tensors ride on a reverse-mode tape,
//! with the layers, recurrent cells, optimizer, and serialization needed by
//! the sequence surrogates in this crate.

pub mod activation;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tape;

pub use activation::Activation;
pub use tape::{Grads, Tape, Var};
