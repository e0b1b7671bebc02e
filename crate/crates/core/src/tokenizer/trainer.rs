//! Frequency-based WordPiece induction.
//!
//! Words start as characters (`c`, then `##c` for non-initial positions).
//! Each round merges the adjacent pair with the highest
//! `count(pair) / (count(left) * count(right))`; ties go to the
//! lexicographically smallest merged string. Word counts are kept in sorted
//! maps, so the result does not depend on document order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;

use super::vocab::{VocabError, Vocabulary};
use super::{CONTINUATION, MAX_VOCAB_SIZE, MAX_WORD_CHARS, SPECIALS};
use crate::corpus::SentenceDoc;

/// A trained vocabulary and whether it reached the requested size.
#[derive(Debug, Clone)]
pub struct VocabBuild {
    pub vocab: Vocabulary,
    pub target_reached: bool,
}

type Pair = (u32, u32);

struct MergeState {
    symbols: Vec<String>,
    symbol_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    symbol_freq: Vec<u64>,
    pair_freq: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, BTreeSet<usize>>,
}

impl MergeState {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.symbol_ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.symbol_ids.insert(s.to_string(), id);
        self.symbol_freq.push(0);
        id
    }

    fn account(&mut self, w: usize, sign: i64) {
        let (syms, count) = &self.words[w];
        let count = *count;
        for &s in syms {
            let f = &mut self.symbol_freq[s as usize];
            *f = f.wrapping_add_signed(sign * count as i64);
        }
        for pair in syms.windows(2).map(|p| (p[0], p[1])) {
            let f = self.pair_freq.entry(pair).or_insert(0);
            *f = f.wrapping_add_signed(sign * count as i64);
            if *f == 0 {
                self.pair_freq.remove(&pair);
            } else if sign > 0 {
                self.pair_words.entry(pair).or_default().insert(w);
            }
        }
    }

    fn best_pair(&self) -> Option<Pair> {
        let mut best: Option<(Pair, String)> = None;
        for (&pair, &pf) in &self.pair_freq {
            let better = match &best {
                None => true,
                Some((bp, bs)) => {
                    // pf / (fa fb) vs bpf / (bfa bfb), cross-multiplied
                    let lhs = u128::from(pf)
                        * u128::from(self.symbol_freq[bp.0 as usize])
                        * u128::from(self.symbol_freq[bp.1 as usize]);
                    let rhs = u128::from(self.pair_freq[bp])
                        * u128::from(self.symbol_freq[pair.0 as usize])
                        * u128::from(self.symbol_freq[pair.1 as usize]);
                    match lhs.cmp(&rhs) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => self.merged(pair) < *bs,
                    }
                }
            };
            if better {
                best = Some((pair, self.merged(pair)));
            }
        }
        best.map(|(p, _)| p)
    }

    fn merged(&self, (a, b): Pair) -> String {
        let right = &self.symbols[b as usize];
        let mut s = self.symbols[a as usize].clone();
        s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
        s
    }

    fn apply(&mut self, pair: Pair, new_id: u32) {
        let affected = self.pair_words.remove(&pair).unwrap_or_default();
        for w in affected {
            if !self.words[w].0.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.account(w, -1);
            let syms = &mut self.words[w].0;
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged;
            self.account(w, 1);
        }
    }
}

/// Induces a WordPiece vocabulary of at most `target_size` entries.
///
/// `injected` tokens are placed right after the specials and are never split
/// or counted as training words. When the corpus runs out of merges first the
/// smaller vocabulary is returned with `target_reached = false`.
pub fn build_vocab<'a, I>(
    docs: I,
    target_size: usize,
    injected: &[&str],
) -> Result<VocabBuild, VocabError>
where
    I: IntoIterator<Item = &'a SentenceDoc>,
{
    let target_size = target_size.min(MAX_VOCAB_SIZE);
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for doc in docs {
        for sentence in &doc.sentences {
            for word in sentence.split_whitespace() {
                if injected.contains(&word) || word.chars().count() > MAX_WORD_CHARS {
                    continue;
                }
                *word_counts.entry(word).or_insert(0) += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut injected_unique: Vec<&str> = Vec::new();
    for t in injected {
        if !injected_unique.contains(t) && !SPECIALS.contains(t) {
            injected_unique.push(t);
        }
    }
    tokens.extend(injected_unique.iter().map(|t| t.to_string()));

    let mut alphabet = BTreeSet::new();
    for word in word_counts.keys() {
        for (i, c) in word.chars().enumerate() {
            alphabet.insert(if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            });
        }
    }
    let minimum = tokens.len() + alphabet.iter().filter(|a| !tokens.contains(a)).count();
    if target_size < minimum {
        return Err(VocabError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut state = MergeState {
        symbols: Vec::new(),
        symbol_ids: HashMap::new(),
        words: Vec::with_capacity(word_counts.len()),
        symbol_freq: Vec::new(),
        pair_freq: HashMap::new(),
        pair_words: HashMap::new(),
    };
    for a in &alphabet {
        state.intern(a);
        if !tokens.contains(a) {
            tokens.push(a.clone());
        }
    }
    for (word, &count) in &word_counts {
        let syms = word
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let s = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                };
                state.symbol_ids[&s]
            })
            .collect();
        state.words.push((syms, count));
        let w = state.words.len() - 1;
        state.account(w, 1);
    }

    let mut in_vocab: BTreeSet<String> = tokens.iter().cloned().collect();
    while tokens.len() < target_size {
        let Some(pair) = state.best_pair() else {
            break;
        };
        let merged = state.merged(pair);
        let id = state.intern(&merged);
        state.apply(pair, id);
        if in_vocab.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    let target_reached = tokens.len() >= target_size;
    if !target_reached {
        warn!(
            "event=vocab_exhausted size={} target={}",
            tokens.len(),
            target_size
        );
    }
    let vocab = Vocabulary::new(tokens, injected_unique.iter().copied())?;
    Ok(VocabBuild {
        vocab,
        target_reached,
    })
}
