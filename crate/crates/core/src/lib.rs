//! # tweetbench
//!
//! A desk-scale benchmark toolkit for English tweet sentiment classification
//! on the SemEval-2017 Task 4 subtasks A (3-point), B (2-point, topic) and
//! C (5-point, topic).
//!
//! ```text
//! TSV ─► corpus ─► tokenizer ─► encoder ─┐
//!                  (BPE, MLM)            ├─► metrics ─► harness reports
//!            └───► naive Bayes ──────────┘
//! ```
//!
//! Every stochastic step takes an explicit seed, so identical configs give
//! byte-identical predictions and reports.

pub mod corpus;
pub mod encoder;
pub mod fixtures;
pub mod harness;
pub mod metrics;
pub mod nb;
pub mod reference;
pub mod selftest;
pub mod tokenizer;

pub use corpus::{
    class_distribution, load_dataset, normalize_tweet, stratified_split, CorpusError, Dataset, Label, LabeledTweet,
    ScaleKind, SentimentScale, Subtask,
};
pub use encoder::{EncoderConfig, EncoderError, EncoderModel, TrainConfig};
pub use harness::{ExperimentConfig, HarnessError, RunResult};
pub use metrics::{compute_metrics, confusion, ConfusionMatrix, MetricsError, MetricsReport};
pub use nb::{NbError, NbModel};
pub use tokenizer::{TokenSequence, TokenizerError, Vocab};
