//! Susceptibility-guided training-data re-weighting.
//!
//! Estimate how posterior observables of small transformers respond to
//! shifts in the data distribution, invert that linear response to obtain
//! data re-weightings, and retrain on the re-weighted data.
//!
//! The numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod bracket;
pub mod error;
pub mod harness;
pub mod induction;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod sampler;
pub mod scalar;
pub mod solver;
pub mod susceptibility;
pub mod util;

pub use error::{Error, Result};
pub use model::{Batch, Component, Example, ModelConfig, ParamVector, TaskHead, Transformer};
pub use scalar::{Precision, Scalar};

pub type ParamVector64 = ParamVector<f64>;
pub type ParamVector32 = ParamVector<f32>;
