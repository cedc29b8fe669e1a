//! Predictive coding networks with configurable layer energies, alongside a
//! backpropagation baseline sharing the same model definitions.

pub mod autodiff;
pub mod bp;
pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pc;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
