//! Channel condensation, hinge pruning and student-teacher fine-tuning for
//! convolutional encoder-decoder image generators.

pub mod autodiff;
pub mod costmodel;
pub mod dataio;
pub mod distill;
pub mod error;
pub mod hingeprune;
pub mod kernels;
pub mod netgraph;
pub mod optim;
pub mod penalize;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
