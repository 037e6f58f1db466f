//! Adversarial training of classifiers against learned generative
//! adversaries, with gradient-based attacks and evaluation tooling.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod minimax;
pub mod error;
pub mod eval;
pub mod game;
pub mod zoo;
pub mod nn;
pub mod tensor;

pub use error::{CheckpointErrorKind, Error, Result};
pub use tensor::Tensor;
