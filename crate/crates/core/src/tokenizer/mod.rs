//! WordPiece vocabulary induction, encoding and decoding.

mod trainer;
mod vocab;

pub use trainer::{build_vocab, VocabBuild};
pub use vocab::{DecodeError, TokenSequence, VocabError, VocabSummary, Vocabulary};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Specials in id order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const NUM_SPECIAL: usize = SPECIALS.len();

pub const MAX_VOCAB_SIZE: usize = 30_000;
/// Words longer than this (in chars) encode straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;
pub const CONTINUATION: &str = "##";
