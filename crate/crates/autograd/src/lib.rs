//! Tape-based reverse-mode automatic differentiation over small dense `f64`
//! tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Trainable values
//! live in a [`ParamStore`]; they enter a tape through [`Tape::param`] and
//! their gradients come back out of [`Gradients`] keyed by [`ParamId`].
//! Tapes are cheap, single-use and owned by one thread, so a batch can be
//! evaluated one sample per tape in parallel and the per-sample gradients
//! summed in a fixed order.

pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use params::{GradBuffer, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
