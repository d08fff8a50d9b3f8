//! Joint sampling from two independently trained 1-D diffusion models,
//! steered by the input-gradient of a small real-vs-fake pair discriminator.
//!
//! Pipeline: [`gmm`] generates toy data, [`trainer`] fits the base noise
//! predictors and then the discriminator, [`sampler`] runs guided or
//! independent ancestral sampling and [`eval`] scores the result.
//! [`pipeline`] wires the stages together for the experiment grid.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod mlp;
pub mod networks;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
