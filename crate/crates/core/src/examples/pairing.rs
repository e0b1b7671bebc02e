use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::{NspLabel, PAIR_BUDGET};
use crate::corpus::SentenceDoc;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// A document as a list of encoded sentences.
pub type EncodedDoc = Vec<TokenSequence>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub label: NspLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairError {
    #[error("random-pair sampling needs at least 2 non-empty documents, found {0}")]
    TooFewDocuments(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct PairingOptions {
    /// Probability that segment B is the true continuation.
    pub next_probability: f64,
    /// Token budget shared by both segments.
    pub budget: usize,
}

impl Default for PairingOptions {
    fn default() -> Self {
        PairingOptions {
            next_probability: 0.5,
            budget: PAIR_BUDGET,
        }
    }
}

/// Encodes every sentence; empty sentences and documents are dropped.
pub fn encode_docs(docs: &[SentenceDoc], vocab: &Vocabulary) -> Vec<EncodedDoc> {
    docs.par_iter()
        .map(|d| {
            d.sentences
                .iter()
                .map(|s| vocab.encode(s))
                .filter(|s| !s.is_empty())
                .collect::<EncodedDoc>()
        })
        .filter(|d| !d.is_empty())
        .collect()
}

/// Builds NSP segment pairs.
///
/// Each document is cut into chunks greedily packed up to the budget, so the
/// number of pairs per pass does not depend on the RNG. For each chunk a coin
/// with `next_probability` picks the label. An is-next pair splits a
/// multi-sentence chunk at a random point (or borrows the following sentence
/// when the chunk holds one). A random pair keeps a prefix of the chunk as A
/// and fills B from a random start in a uniformly chosen other document. A
/// single-sentence document with nothing following always yields a random
/// pair. Pairs over budget are trimmed one token at a time from the longer
/// segment, at a random end.
pub fn pair_sentences(
    docs: &[EncodedDoc],
    opts: PairingOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SegmentPair>, PairError> {
    if docs.len() < 2 {
        return Err(PairError::TooFewDocuments(docs.len()));
    }
    let mut pairs = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut i = 0;
        while i < doc.len() {
            let mut j = i;
            let mut used = 0;
            while j < doc.len() && (j == i || used + doc[j].len() <= opts.budget) {
                used += doc[j].len();
                j += 1;
            }
            let chunk = &doc[i..j];
            i = j;

            let want_next = rng.gen_bool(opts.next_probability);
            let pair = if want_next && chunk.len() >= 2 {
                let split = rng.gen_range(1..chunk.len());
                SegmentPair {
                    a: concat(&chunk[..split]),
                    b: concat(&chunk[split..]),
                    label: NspLabel::IsNext,
                }
            } else if want_next && j < doc.len() {
                SegmentPair {
                    a: concat(chunk),
                    b: doc[j].clone(),
                    label: NspLabel::IsNext,
                }
            } else {
                let split = if chunk.len() >= 2 {
                    rng.gen_range(1..chunk.len())
                } else {
                    1
                };
                let a = concat(&chunk[..split]);
                let mut other = rng.gen_range(0..docs.len() - 1);
                if other >= d {
                    other += 1;
                }
                let other = &docs[other];
                let start = rng.gen_range(0..other.len());
                let room = opts.budget.saturating_sub(a.len());
                let mut end = start + 1;
                let mut b_len = other[start].len();
                while end < other.len() && b_len + other[end].len() <= room {
                    b_len += other[end].len();
                    end += 1;
                }
                SegmentPair {
                    a,
                    b: concat(&other[start..end]),
                    label: NspLabel::Random,
                }
            };
            pairs.push(truncate_pair(pair, opts.budget, rng));
        }
    }
    Ok(pairs)
}

fn concat(sentences: &[TokenSequence]) -> TokenSequence {
    let mut out = TokenSequence::default();
    for s in sentences {
        out.ids.extend_from_slice(&s.ids);
        out.word_start.extend_from_slice(&s.word_start);
    }
    out
}

fn truncate_pair(mut pair: SegmentPair, budget: usize, rng: &mut ChaCha8Rng) -> SegmentPair {
    while pair.a.len() + pair.b.len() > budget {
        let seg = if pair.a.len() >= pair.b.len() {
            &mut pair.a
        } else {
            &mut pair.b
        };
        if rng.gen_bool(0.5) {
            seg.ids.remove(0);
            seg.word_start.remove(0);
        } else {
            seg.ids.pop();
            seg.word_start.pop();
        }
    }
    pair
}

/// Convenience wrapper seeding a fresh generator.
pub fn pair_sentences_seeded(
    docs: &[EncodedDoc],
    opts: PairingOptions,
    seed: u64,
) -> Result<Vec<SegmentPair>, PairError> {
    pair_sentences(docs, opts, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            word_start: vec![true; ids.len()],
        }
    }

    #[test]
    fn forced_next_uses_continuation() {
        let docs = vec![vec![sent(&[10]), sent(&[11])], vec![sent(&[20])]];
        let opts = PairingOptions {
            next_probability: 1.0,
            ..Default::default()
        };
        let pairs = pair_sentences_seeded(&docs, opts, 1).unwrap();
        assert_eq!(pairs[0].a.ids, [10]);
        assert_eq!(pairs[0].b.ids, [11]);
        assert_eq!(pairs[0].label, NspLabel::IsNext);
        // the lone second document has no continuation
        assert_eq!(pairs[1].label, NspLabel::Random);
        assert!([10, 11].contains(&pairs[1].b.ids[0]));
    }

    #[test]
    fn single_doc_is_error() {
        let docs = vec![vec![sent(&[1]), sent(&[2])]];
        assert_eq!(
            pair_sentences_seeded(&docs, PairingOptions::default(), 0),
            Err(PairError::TooFewDocuments(1))
        );
    }

    #[test]
    fn pairs_fit_budget() {
        let long: Vec<u32> = (0..80).collect();
        let docs = vec![
            vec![sent(&long), sent(&long), sent(&long)],
            vec![sent(&long)],
            vec![sent(&[5, 6]), sent(&[7])],
        ];
        for seed in 0..20 {
            for p in pair_sentences_seeded(&docs, PairingOptions::default(), seed).unwrap() {
                assert!(p.a.len() + p.b.len() <= PAIR_BUDGET);
                assert!(!p.a.is_empty() && !p.b.is_empty());
            }
        }
    }

    #[test]
    fn pair_count_is_seed_independent() {
        let docs: Vec<EncodedDoc> = (0..30)
            .map(|d| {
                (0..(d % 4 + 1))
                    .map(|s| sent(&[d * 10 + s + 5; 7]))
                    .collect()
            })
            .collect();
        let n0 = pair_sentences_seeded(&docs, PairingOptions::default(), 0)
            .unwrap()
            .len();
        for seed in 1..10 {
            let n = pair_sentences_seeded(&docs, PairingOptions::default(), seed)
                .unwrap()
                .len();
            assert_eq!(n, n0);
        }
    }
}
