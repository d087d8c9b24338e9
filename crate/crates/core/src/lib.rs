//! Test-time masked-language-model customization of a small protein
//! encoder: sequence I/O, the transformer backbone with LoRA, masking,
//! SGD, the customization engine, scoring and frozen downstream heads.

pub mod backbone;
pub mod config;
pub mod error;
pub mod heads;
pub mod masking;
pub mod optim;
pub mod scoring;
pub mod seqio;
pub mod synth;
pub mod tensor;
pub mod ttt;

pub use backbone::{Model, ModelConfig, TrainableSelection};
pub use error::{Error, Result};
