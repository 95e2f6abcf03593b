//! Dynamic slimmable speech separation: model, losses, profiler, data
//! and training.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dualpath;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod gradcheck;
pub mod losses;
pub mod params;
pub mod profiler;
pub mod separator;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
