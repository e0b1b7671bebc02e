//! Synthetic corpora with known structure, for smoke tests and demos.
//!
//! [`ToyCorpus`] plants bigram chains inside disjoint topics: each topic owns
//! a slice of the vocabulary and a successor permutation over it. A masked
//! token is predictable from its neighbours, and a random second segment
//! always comes from another topic, so NSP is separable.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{EvalError, LabeledDataset};
use crate::examples::{mask_tokens, pair_layout, NspLabel, PretrainExample, SegmentPair};
use crate::tokenizer::{TokenSequence, Vocabulary, NUM_SPECIAL};

/// Special tokens followed by words `w5`, `w6`, ... up to `size` entries.
pub fn toy_vocabulary(size: usize) -> Vocabulary {
    assert!(size > NUM_SPECIAL, "toy vocabulary needs room for words");
    let mut tokens: Vec<String> = crate::tokenizer::SPECIALS
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend((NUM_SPECIAL..size).map(|i| format!("w{i}")));
    Vocabulary::new(tokens, Vec::<String>::new()).expect("toy vocabulary is valid")
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub vocab_size: usize,
    /// Word ids of each topic.
    pub topics: Vec<Vec<u32>>,
    /// Successor of each word id within its topic's cycle.
    successor: Vec<u32>,
    /// Probability of a uniformly random in-topic step instead of the successor.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl ToyCorpus {
    pub fn new(vocab_size: usize, topics: usize, structure_seed: u64) -> Self {
        let words = vocab_size - NUM_SPECIAL;
        assert!(
            topics >= 2 && words >= 2 * topics,
            "too few words per topic"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let mut ids: Vec<u32> = (NUM_SPECIAL as u32..vocab_size as u32).collect();
        ids.shuffle(&mut rng);
        let mut groups: Vec<Vec<u32>> = vec![Vec::new(); topics];
        for (i, id) in ids.into_iter().enumerate() {
            groups[i % topics].push(id);
        }
        let mut successor = vec![0; vocab_size];
        for g in &mut groups {
            g.sort_unstable();
            let mut cycle = g.clone();
            cycle.shuffle(&mut rng);
            for k in 0..cycle.len() {
                successor[cycle[k] as usize] = cycle[(k + 1) % cycle.len()];
            }
        }
        ToyCorpus {
            vocab_size,
            topics: groups,
            successor,
            noise: 0.1,
            min_len: 6,
            max_len: 12,
        }
    }

    pub fn successor(&self, id: u32) -> u32 {
        self.successor[id as usize]
    }

    fn walk(&self, topic: usize, start: u32, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = start;
        for _ in 0..len {
            out.push(cur);
            cur = if rng.gen_bool(self.noise) {
                *self.topics[topic].choose(rng).unwrap()
            } else {
                self.successor(cur)
            };
        }
        out
    }

    /// One sentence pair: B continues A's chain (IsNext) or walks another
    /// topic (Random), each with probability 0.5.
    pub fn pair(&self, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>, NspLabel) {
        let t = rng.gen_range(0..self.topics.len());
        let la = rng.gen_range(self.min_len..=self.max_len);
        let lb = rng.gen_range(self.min_len..=self.max_len);
        let start = *self.topics[t].choose(rng).unwrap();
        let a = self.walk(t, start, la, rng);
        if rng.gen_bool(0.5) {
            let next = self.successor(*a.last().unwrap());
            (a, self.walk(t, next, lb, rng), NspLabel::IsNext)
        } else {
            let mut u = rng.gen_range(0..self.topics.len() - 1);
            if u >= t {
                u += 1;
            }
            let start = *self.topics[u].choose(rng).unwrap();
            (a, self.walk(u, start, lb, rng), NspLabel::Random)
        }
    }

    /// `n` masked pretraining examples (whole-word masking over one-piece
    /// words).
    pub fn examples(&self, n: usize, seed: u64) -> Vec<PretrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (a, b, label) = self.pair(&mut rng);
                let seg = |ids: Vec<u32>| TokenSequence {
                    word_start: vec![true; ids.len()],
                    ids,
                };
                let pair = SegmentPair {
                    a: seg(a),
                    b: seg(b),
                    label,
                };
                let masked = mask_tokens(&pair_layout(&pair), self.vocab_size, &mut rng);
                PretrainExample::assemble(&pair, &masked)
            })
            .collect()
    }
}

/// A linearly separable `classes`-way dataset over a toy vocabulary: each
/// class owns four keywords, and every text holds three keywords of its
/// class among three shared filler words. Train and dev texts are distinct.
pub fn separable_dataset(
    name: &str,
    vocab: &Vocabulary,
    classes: usize,
    n_train: usize,
    n_dev: usize,
    seed: u64,
) -> Result<LabeledDataset, EvalError> {
    let keywords = 4;
    let words: Vec<&str> = vocab.tokens()[NUM_SPECIAL..]
        .iter()
        .map(String::as_str)
        .collect();
    assert!(
        words.len() >= classes * keywords + 8,
        "vocabulary too small"
    );
    let (keys, filler) = words.split_at(classes * keywords);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(n_train + n_dev);
    let mut attempts = 0usize;
    while rows.len() < n_train + n_dev {
        attempts += 1;
        assert!(
            attempts < 1000 * (n_train + n_dev),
            "cannot draw enough distinct texts"
        );
        let c = rows.len() % classes;
        let mut text: Vec<&str> = Vec::with_capacity(6);
        for _ in 0..3 {
            text.push(keys[c * keywords + rng.gen_range(0..keywords)]);
        }
        for _ in 0..3 {
            text.push(filler.choose(&mut rng).unwrap());
        }
        text.shuffle(&mut rng);
        let text = text.join(" ");
        if seen.insert(text.clone()) {
            rows.push((text, format!("class{c}")));
        }
    }
    rows.shuffle(&mut rng);
    let dev = rows.split_off(n_train);
    LabeledDataset::from_rows(name, rows, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure() {
        let c = ToyCorpus::new(64, 4, 1);
        assert_eq!(c.topics.iter().map(Vec::len).sum::<usize>(), 59);
        for (t, g) in c.topics.iter().enumerate() {
            for &w in g {
                assert!(c.topics[t].contains(&c.successor(w)));
            }
        }
        let ex = c.examples(50, 2);
        assert!(ex.iter().all(|e| e.num_predictions >= 1));
        assert!(ex
            .iter()
            .all(|e| e.input_ids.iter().all(|&i| (i as usize) < 64)));
        assert_eq!(c.examples(5, 3), c.examples(5, 3));
    }

    #[test]
    fn separable() {
        let v = toy_vocabulary(64);
        let ds = separable_dataset("toy3", &v, 3, 500, 300, 4).unwrap();
        assert_eq!(
            (ds.train.len(), ds.dev.len(), ds.classes.len()),
            (500, 300, 3)
        );
        assert_eq!(v.encode(&ds.train[0].0).ids.len(), 6);
    }
}
