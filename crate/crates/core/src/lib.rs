//! Reconstruction-based anomaly detection toolkit.
//!
//! A generator learns to reconstruct normal images while treating its own
//! reconstructions as pseudo-anomalies whose second-pass reconstruction must
//! fail; a discriminator separates real from generated data and doubles as a
//! latent feature extractor. Optionally a small pool of labeled anomalies
//! joins training through a reciprocal anomaly objective. Scoring ranks test
//! examples by reconstruction error.
//!
//! Everything numerical is generic over the [`scalar::Scalar`] element type;
//! `f32` aliases are exported at the crate root for everyday use and `f64` is
//! used by the verification harness.

pub mod checkpoint;
pub mod datasets;
pub mod graph;
pub mod losses;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod scoring;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use graph::{Tape, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default element type for training and inference.
pub type Real = f32;
/// Tensor specialization used by the command-line tools.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by the verification harness.
pub type Tensor64 = Tensor<f64>;
/// Generator at the default element type.
pub type Generator32 = models::Generator<f32>;
/// Discriminator at the default element type.
pub type Discriminator32 = models::Discriminator<f32>;
