//! Context-conditioned cascaded CNN reconstruction for undersampled MRI.

pub mod adam;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
