//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every step: parameters enter as leaves, the
//! forward pass records primitives, and [`Tape::backward`] returns the
//! gradient of a scalar loss with respect to every leaf that asked for one.
//! Broadcasting is limited to the leading (batch) axis. Every primitive checks
//! its output and fails with [`Error::NonFinite`](crate::Error::NonFinite)
//! naming the operation instead of letting NaNs propagate.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
