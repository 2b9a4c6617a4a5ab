//! Migration-context conditioned dialog personalization.
//!
//! The crate is organised bottom-up:
//!
//! - [`textstats`]: tokenizer and lexical-richness metrics.
//! - [`corpus`]: the dialog data model, validation, migration-context
//!   filtering, splitting, descriptive statistics and a synthetic generator.
//! - [`embeddings`]: vocabulary, word-vector loading and idf-weighted memory
//!   encoding.
//! - [`autodiff`]: a small reverse-mode differentiation tape with an LSTM
//!   cell, softmax cross-entropy and first-order optimizers.
//! - [`dataset`]: turns dialogs into (history, context, gold) examples.
//! - [`models`]: sequence-to-sequence, profile memory network and
//!   Starspace-style retrieval, plus training and checkpoints.
//! - [`eval`]: F1, perplexity, hits@1, ablation reports and rating
//!   aggregation.

pub mod autodiff;
pub mod corpus;
pub mod dataset;
pub mod embeddings;
mod error;
pub mod eval;
pub mod models;
pub mod textstats;

pub use error::{Error, Result};
