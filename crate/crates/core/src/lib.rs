//! Low-rank mixture-of-experts classifiers for handwriting-based Alzheimer's
//! screening, with MoE and MLP baselines and the DARWIN experiment harness.
//!
//! Everything is `f64`, CPU only, and deterministic for a given seed.

pub mod autograd;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod numerics;
pub mod parallel;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use layers::{Model, ModelConfig, ModelKind};
pub use numerics::{Matrix, Rng};
pub use parallel::Execution;
