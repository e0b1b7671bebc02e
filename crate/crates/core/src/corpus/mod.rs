//! Tweet corpus preparation: normalization, pseudonymization, deduplication
//! and sentence segmentation.

mod clean;
mod dedup;
mod emoji;
mod io;
mod segment;

pub use clean::{clean_tweet, CleanError};
pub use dedup::{dedup_corpus, jaccard, word_shingles, Deduplicator, Verdict, NUM_HASHES};
pub use emoji::{in_emoji_range, EmojiTable, EmojiTableError};
pub use io::{
    prep_corpus, read_docs_jsonl, read_raw_tweets, write_docs_jsonl, PrepError, PrepStats,
    RejectRecord,
};
pub use segment::{segment_sentences, SegmentError};

use serde::{Deserialize, Serialize};

/// Upper bound on raw tweet length, in unicode scalar values.
pub const MAX_RAW_CHARS: usize = 4000;

/// A tweet as ingested from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTweet {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub created_at: String,
}

impl RawTweet {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        RawTweet {
            id: id.into(),
            text: text.into(),
            created_at: String::new(),
        }
    }
}

/// A normalized, pseudonymized tweet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanTweet {
    pub id: String,
    pub text: String,
    pub was_retweet: bool,
}

/// A tweet split into sentences, in original order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceDoc {
    pub id: String,
    pub sentences: Vec<String>,
}
