use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::{CleanTweet, SentenceDoc};

// A terminal mark followed by whitespace ends a sentence; the end of text
// ends the last one. Placeholders and `:shortcode:` tokens contain none of
// `.!?` and so are never split.
static BOUNDARY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]\s+").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("tweet {0} has no text after normalization")]
    Empty(String),
}

pub fn segment_sentences(tweet: &CleanTweet) -> Result<SentenceDoc, SegmentError> {
    let text = tweet.text.trim();
    if text.is_empty() {
        return Err(SegmentError::Empty(tweet.id.clone()));
    }
    let mut sentences = Vec::new();
    let mut start = 0;
    for m in BOUNDARY.find_iter(text) {
        // the mark itself is one byte
        push_trimmed(&mut sentences, &text[start..m.start() + 1]);
        start = m.end();
    }
    push_trimmed(&mut sentences, &text[start..]);
    Ok(SentenceDoc {
        id: tweet.id.clone(),
        sentences,
    })
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}
