//! Open-vocabulary language modelling for low-resource, morphologically rich
//! languages.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`]: cleaning, sequential train/valid/test splits, concatenation
//!   of corpora from several languages and basic statistics.
//! - [`bpe`]: byte-pair-encoding tokenizers trained on the training split only.
//! - [`ngram`]: interpolated modified Kneser-Ney n-gram models and ARPA I/O.
//! - [`tensor`]: a small dense tensor library with reverse-mode autodiff,
//!   dropout masks and optimizers.
//! - [`nn`]: FFNN, LSTM, AWD-LSTM, QRNN and Transformer language models.
//! - [`train`]: batching, schedules, early stopping and training loops.
//! - [`eval`]: cross-entropy, perplexity and bits-per-character reports.

pub mod bpe;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod ngram;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
