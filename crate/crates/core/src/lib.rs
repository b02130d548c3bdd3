//! Fairness-oriented GRPO fine-tuning of a small causal language model.
//!
//! Everything numeric is generic over [`numerics::Scalar`]; the aliases
//! below fix the precision used by the command-line tool.

pub mod config;
pub mod error;
pub mod fsutil;
pub mod grpo;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod rewards;
pub mod sampling;
pub mod scorer;
pub mod text;

pub use error::{Error, Result};

pub type LanguageModel = model::TransformerLm<f32>;
pub type FairnessClassifier = scorer::FairnessClassifier<f32>;
pub type Tape = numerics::Tape<f32>;
