//! Concept embedding models with concept-level disentanglement and concept
//! mixup, their bottleneck baselines, a synthetic spurious-background
//! benchmark, reliability metrics and the experiment harness that ties them
//! together.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod reliability;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
