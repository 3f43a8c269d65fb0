//! Multi-event video causal discovery.
//!
//! Given an ordered sequence of events (frame features plus a caption), the
//! model decides which premise events cause the final event by comparing the
//! predicted result representation with and without each premise masked.
//! Front-door compensation and counterfactual removal refine the masked
//! prediction before the relation head sees it.
//!
//! All numerical code is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient verification); the aliases below fix the common choices.

pub mod annotations;
pub mod autodiff;
pub mod causal;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
#[cfg(test)]
mod fixtures;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

/// Single-precision model, the training default.
pub type Vgcm32 = model::Vgcm<f32>;
/// Double-precision model, used for gradient checks.
pub type Vgcm64 = model::Vgcm<f64>;
pub type Event32 = annotations::Event<f32>;
pub type Event64 = annotations::Event<f64>;
pub type Dataset32 = annotations::Dataset<f32>;
pub type Dataset64 = annotations::Dataset<f64>;
