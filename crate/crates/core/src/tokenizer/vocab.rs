use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use super::{CONTINUATION, MAX_VOCAB_SIZE, MAX_WORD_CHARS, NUM_SPECIAL, SPECIALS, UNK_ID};
use crate::util::sha256_hex;
use crate::{URL_TOKEN, USER_TOKEN};

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary has {0} entries, above the {MAX_VOCAB_SIZE} limit")]
    TooLarge(usize),
    #[error("id {id} must be {expected}, found {found:?}")]
    Special {
        id: usize,
        expected: &'static str,
        found: Option<String>,
    },
    #[error("duplicate token {token:?} at id {id}")]
    Duplicate { token: String, id: usize },
    #[error("empty token at id {0}")]
    EmptyToken(usize),
    #[error("injected token {0:?} missing from vocabulary")]
    MissingInjected(String),
    #[error("target size {target} below the minimum {minimum} (specials + injected + alphabet)")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("corpus has no words")]
    EmptyCorpus,
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("id {id} at position {position} is outside the vocabulary (size {size})")]
pub struct DecodeError {
    pub position: usize,
    pub id: u32,
    pub size: usize,
}

/// Encoded ids plus a parallel word-start mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub word_start: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.word_start.iter().filter(|&&s| s).count()
    }
}

/// Immutable WordPiece vocabulary. Ids are line numbers of the vocab file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    injected: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VocabSummary {
    pub size: usize,
    pub hash: String,
    pub specials: Vec<String>,
    pub injected: Vec<String>,
    pub word_initial: usize,
    pub continuations: usize,
    pub longest: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: Vec<String>, injected: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if tokens.len() > MAX_VOCAB_SIZE {
            return Err(VocabError::TooLarge(tokens.len()));
        }
        for (id, expected) in SPECIALS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*expected) {
                return Err(VocabError::Special {
                    id,
                    expected,
                    found: tokens.get(id).cloned(),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(VocabError::EmptyToken(id));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(VocabError::Duplicate {
                    token: tok.clone(),
                    id,
                });
            }
        }
        let injected: BTreeSet<String> = injected.into_iter().map(Into::into).collect();
        if let Some(missing) = injected.iter().find(|t| !index.contains_key(*t)) {
            return Err(VocabError::MissingInjected(missing.clone()));
        }
        Ok(Vocabulary {
            tokens,
            index,
            injected,
        })
    }

    /// Parses a vocab file (one token per line). The canonical user/URL
    /// placeholders are treated as whole tokens when present.
    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        let injected: Vec<&str> = [USER_TOKEN, URL_TOKEN]
            .into_iter()
            .filter(|t| tokens.iter().any(|x| x == t))
            .collect();
        Self::new(tokens, injected)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::util::write_atomic(path, self.to_text().as_bytes())
    }

    /// SHA-256 of the vocab file contents.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn injected(&self) -> impl Iterator<Item = &str> {
        self.injected.iter().map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Greedy longest-match-first WordPiece over whitespace-split words.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut seq);
        }
        seq
    }

    fn encode_word(&self, word: &str, seq: &mut TokenSequence) {
        if self.injected.contains(word) {
            seq.ids.push(self.index[word]);
            seq.word_start.push(true);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            seq.ids.push(UNK_ID);
            seq.word_start.push(true);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(&id) = self.index.get(candidate.as_str()) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    seq.ids.push(UNK_ID);
                    seq.word_start.push(true);
                    return;
                }
            }
        }
        for (i, id) in pieces.into_iter().enumerate() {
            seq.ids.push(id);
            seq.word_start.push(i == 0);
        }
    }

    /// Joins `##` continuations onto the previous piece and drops specials.
    pub fn decode(&self, ids: &[u32]) -> Result<String, DecodeError> {
        let mut out = String::new();
        for (position, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(DecodeError {
                position,
                id,
                size: self.len(),
            })?;
            if Self::is_special(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn summary(&self) -> VocabSummary {
        let continuations = self
            .tokens
            .iter()
            .skip(NUM_SPECIAL)
            .filter(|t| t.starts_with(CONTINUATION) && t.len() > CONTINUATION.len())
            .count();
        let mut longest: Vec<&String> = self.tokens.iter().skip(NUM_SPECIAL).collect();
        longest.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
        VocabSummary {
            size: self.len(),
            hash: self.hash(),
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            injected: self.injected.iter().cloned().collect(),
            word_initial: self.len() - NUM_SPECIAL - continuations,
            continuations,
            longest: longest.into_iter().take(10).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CLS_ID, SEP_ID};
    use super::*;

    fn toy() -> Vocabulary {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in [
            "un",
            "##aff",
            "##able",
            "##a",
            "hello",
            "world",
            "twitteruser",
            "a",
            "##b",
        ] {
            tokens.push(t.to_string());
        }
        Vocabulary::new(tokens, ["twitteruser"]).unwrap()
    }

    #[test]
    fn unaffable_greedy() {
        let v = toy();
        let seq = v.encode("unaffable");
        let expect: Vec<u32> = ["un", "##aff", "##able"]
            .iter()
            .map(|t| v.id(t).unwrap())
            .collect();
        assert_eq!(seq.ids, expect);
        assert_eq!(seq.word_start, [true, false, false]);
    }

    #[test]
    fn injected_single_id() {
        let v = toy();
        let seq = v.encode("twitteruser");
        assert_eq!(seq.ids, [v.id("twitteruser").unwrap()]);
        assert_eq!(seq.word_start, [true]);
    }

    #[test]
    fn undecomposable_is_unk() {
        let v = toy();
        let seq = v.encode("xyz hello");
        assert_eq!(seq.ids, [UNK_ID, v.id("hello").unwrap()]);
        assert_eq!(seq.word_start, [true, true]);
        // partial match then failure still collapses the whole word
        assert_eq!(v.encode("unx").ids, [UNK_ID]);
        assert_eq!(v.encode(&"a".repeat(MAX_WORD_CHARS + 1)).ids, [UNK_ID]);
    }

    #[test]
    fn decode_strips_specials_and_joins() {
        let v = toy();
        let hello = v.id("hello").unwrap();
        assert_eq!(v.decode(&[CLS_ID, hello, SEP_ID]).unwrap(), "hello");
        let ids = v.encode("unaffable world").ids;
        assert_eq!(v.decode(&ids).unwrap(), "unaffable world");
    }

    #[test]
    fn decode_out_of_range() {
        let v = toy();
        let err = v.decode(&[v.len() as u32 + 1]).unwrap_err();
        assert_eq!(err.position, 0);
        let err = v.decode(&[5, 6, 999]).unwrap_err();
        assert_eq!(err.position, 2);
    }

    #[test]
    fn file_round_trip() {
        let v = toy();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn validation() {
        let bad = vec!["[UNK]".to_string()];
        assert!(matches!(
            Vocabulary::new(bad, Vec::<String>::new()),
            Err(VocabError::Special { id: 0, .. })
        ));
        let mut dup: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        dup.push("a".into());
        dup.push("a".into());
        assert!(matches!(
            Vocabulary::new(dup, Vec::<String>::new()),
            Err(VocabError::Duplicate { id: 6, .. })
        ));
    }
}
