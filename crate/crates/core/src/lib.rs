//! Desk-scale attention-based seq2seq translation laboratory.
//!
//! An encoder-decoder GRU translation model with three word-embedding
//! bridging variants (source-side, target-side, direct), trained with
//! Adadelta over a reverse-mode autodiff tape, plus beam-search decoding
//! and an alignment/translation analysis suite. Everything is f64 and
//! deterministic per seed so results can be verified on synthetic corpora.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Entry point for the command-line binary; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}
