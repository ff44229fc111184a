//! Mini BERT-style transformer encoder in `f64`, with hand-written backward
//! passes.
//!
//! ```text
//! token + position + segment embedding ─► LayerNorm ─► dropout
//!   └─► L × [ multi-head self-attention ─► +residual ─► LayerNorm
//!             FFN (GELU)               ─► +residual ─► LayerNorm ]
//!   └─► hidden[0] ([CLS]) ─► pooler (affine + tanh) ─► classifier ─► logits
//!   └─► (optional) MLM head: affine + GELU ─► LayerNorm ─► vocabulary logits
//! ```
//!
//! All parameters live in one flat buffer described by a [`Layout`]; the
//! optimizer, the gradient checker and the weight file all walk that layout.

mod config;
mod gradcheck;
mod io;
mod model;
pub mod ops;
mod params;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{EncoderConfig, TrainConfig};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Worst, ABS_FLOOR};
pub use io::{load_weights, load_weights_expecting, save_weights};
pub use model::{forward, loss_and_grad, mlm_forward, ForwardOutput, Gradients, LossParts, MlmOutput, Targets};
pub use params::{EncoderModel, Layout, TensorKind, TensorSpec};
pub use train::{
    accuracy, evaluate_loss, predict_classes, pretrain_mlm, train_classifier, train_on_sequences, EpochRecord,
    PretrainConfig, PretrainOutcome, TrainOutcome,
};

use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("token id {id} is outside the model vocabulary of {vocab_size}")]
    VocabId { id: u32, vocab_size: usize },
    #[error("segment id {0} is not 0 or 1")]
    SegmentId(u8),
    #[error("batch sequences must share one length (found {0} and {1})")]
    UnequalLengths(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("attention mask has no unmasked position")]
    AllMasked,
    #[error("no masked positions to predict")]
    NoMaskedPositions,
    #[error("model has no MLM head")]
    NoMlmHead,
    #[error("{0}")]
    Mismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file config does not match: {0}")]
    ConfigMismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}
