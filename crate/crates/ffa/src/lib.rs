//! Punctuation restoration with a two-stream attention encoder.
//!
//! One stream mixes attention logits across heads through a learnable
//! head-interaction matrix, the other applies a causal mask so each position
//! only sees its left context; their outputs are concatenated and fused by a
//! final encoder layer before token-level classification over
//! `{O, COMMA, PERIOD, QUESTION}`.
//!
//! Everything runs on a small from-scratch tensor core with reverse-mode
//! autodiff, so model correctness is checked by finite differences rather
//! than trust.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use data::{Label, LabeledSequence, Vocabulary, IGNORE_INDEX};
pub use model::FfaModel;
pub use tensor::{DType, Scalar, Tensor, TensorError};
