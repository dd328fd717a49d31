//! Continual learning for variational autoencoders with a boosted mixture
//! prior built from encoded pseudo-inputs.

pub mod autodiff;
pub mod data;
pub mod distributions;
mod error;
pub mod metrics;
pub mod prior;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
