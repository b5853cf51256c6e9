//! Toy-scale transformer efficiency laboratory.
//!
//! Five efficiency operators (distillation, structured pruning, early
//! exiting, dynamic length, 8-bit quantization) are applied as composable
//! pipeline stages to a small trained transformer. A measurement bench
//! builds accuracy/cost tradeoff curves, and a closed-form estimator
//! predicts composite pipelines from individual measurements.

pub mod error;
pub mod estimator;
pub mod evalbench;
pub mod model;
pub mod operators;
pub mod pipeline;
pub mod tape;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
