//! Deterministic simulator for online federated class-incremental learning
//! with uncertainty-aware, class-balanced replay memory.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! experiment runner fixes the scalar to [`Real`]. The aliases below name the
//! concrete types the runner works with.

pub mod config;
pub mod error;
pub mod federation;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scalar;
pub mod stream;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the experiment runner.
pub type Real = f64;

pub type Parameters = model::ParameterVector<Real>;
pub type Optimizer = model::OptimizerState<Real>;
pub type Logits = uncertainty::LogitSet<Real>;
pub type Probabilities = uncertainty::ProbabilitySet<Real>;
pub type Example = stream::LabeledExample<Real>;
pub type Batch = stream::MiniBatch<Real>;
pub type Memory = memory::MemoryBuffer<Real>;
pub type Accuracies = metrics::AccuracyMatrix<Real>;
