//! Partially disentangled VAE: autodiff tape, networks, the partial
//! correlation objective and its batch estimators, synthetic data, and
//! latent-space metrics.

pub mod adam;
pub mod datagen;
pub mod error;
pub mod estlab;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
