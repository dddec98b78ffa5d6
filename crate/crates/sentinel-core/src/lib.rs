//! Abnormality detection for image classifiers, desk scale.
//!
//! Fits class-conditional Gaussians on the layer features of a small CNN
//! and scores inputs with a Mahalanobis confidence score (input
//! preprocessing, per-layer scores, logistic-regression layer ensemble,
//! threshold rule), alongside MSP/ODIN/LID baselines, four adversarial
//! attack generators, and a detection-metric harness.

pub mod container;
pub mod rng;
pub mod tensor;

pub mod gaussian;
pub mod metrics;

pub mod data;
pub mod model;

pub mod attack;
pub mod detect;

pub use tensor::{Tape, Tensor, TensorError, Val};
