//! Domain-adaptive pretraining toolkit.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`] cleans, pseudonymizes, deduplicates and sentence-splits tweets.
//! - [`tokenizer`] induces and applies a WordPiece vocabulary.
//! - [`examples`] turns sentence documents into MLM+NSP shards.
//! - [`model`] is a small transformer encoder with exact gradients.
//! - [`train`] runs pretraining with checkpoints and metric logging.
//! - [`eval`] finetunes checkpoints on labeled data and aggregates macro-F1,
//!   ΔMP and SEM over a checkpoint × dataset × repeat matrix.

pub mod corpus;
pub mod eval;
pub mod examples;
pub mod model;
pub mod tokenizer;
pub mod toy;
pub mod train;
pub mod util;

/// Placeholder that replaces every `@username`.
pub const USER_TOKEN: &str = "twitteruser";
/// Placeholder that replaces every URL.
pub const URL_TOKEN: &str = "twitterurl";
/// Fixed sequence length of pretraining examples.
pub const SEQ_LEN: usize = 96;
/// Maximum masked predictions per example (round(96 * 0.15)).
pub const MAX_PREDICTIONS: usize = 14;
