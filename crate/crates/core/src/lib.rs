//! Mixed-order self-paced curriculum learning on desk-scale classifiers.
//!
//! The numerical core (`math`, `model`, `uncertainty`, `difficulty`,
//! `scheduler`, `conflict`) is generic over [`Scalar`], so the same code runs
//! in `f32` or `f64`. Dataset generation and the experiment harness own file
//! formats and are fixed to `f64`.
//!
//! The training pipeline has three steps:
//!
//! 1. warm up with a uniformly shuffled sampler, then start scoring each
//!    sample by loss and by perturbation uncertainty;
//! 2. rank samples by each score and sum the two rank indices into a
//!    difficulty `d` (smaller `d` is harder);
//! 3. pair hard samples with easy ones inside every mini-batch.

pub mod conflict;
pub mod datagen;
pub mod difficulty;
mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod scalar;
pub mod scheduler;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Identifier attached to every training sample.
pub type SampleId = u64;

pub type Mlp64 = model::Mlp<f64>;
pub type Mlp32 = model::Mlp<f32>;
pub type Gradient64 = model::Gradient<f64>;
pub type Gradient32 = model::Gradient<f32>;
pub type Probability64 = math::Probability<f64>;
pub type Probability32 = math::Probability<f32>;
pub type DifficultyRecord64 = difficulty::DifficultyRecord<f64>;
pub type UncertaintyConfig64 = uncertainty::UncertaintyConfig<f64>;
pub type SpConfig64 = scheduler::SpConfig<f64>;
