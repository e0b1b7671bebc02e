//! Whole-word masking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{TokenSequence, CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID};
use crate::MAX_PREDICTIONS;

/// Fraction of words selected for prediction.
pub const MASK_RATE: f64 = 0.15;

/// What happened to a selected word (decided once per word).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskChoice {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    /// Input ids after replacement.
    pub ids: Vec<u32>,
    /// Strictly increasing predicted positions.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
    /// One entry per selected word, in selection order.
    pub choices: Vec<MaskChoice>,
    /// Number of maskable words in the input.
    pub word_count: usize,
}

fn maskable(id: u32) -> bool {
    id != PAD_ID && id != CLS_ID && id != SEP_ID
}

/// Groups maskable positions into words. A continuation piece with no
/// preceding start (after front truncation) opens its own word.
fn words(seq: &TokenSequence) -> Vec<Vec<usize>> {
    let mut words: Vec<Vec<usize>> = Vec::new();
    let mut open = false;
    for (i, &id) in seq.ids.iter().enumerate() {
        if !maskable(id) {
            open = false;
            continue;
        }
        if seq.word_start[i] || !open {
            words.push(vec![i]);
            open = true;
        } else {
            words.last_mut().unwrap().push(i);
        }
    }
    words
}

/// Selects whole words at [`MASK_RATE`] (stochastically rounded, at least one)
/// without exceeding `MAX_PREDICTIONS` positions, then replaces each selected
/// word's pieces: 80% `[MASK]`, 10% random non-special ids, 10% unchanged.
pub fn mask_tokens(seq: &TokenSequence, vocab_size: usize, rng: &mut ChaCha8Rng) -> MaskedSequence {
    let mut words = words(seq);
    let word_count = words.len();
    let mut out = MaskedSequence {
        ids: seq.ids.clone(),
        positions: Vec::new(),
        labels: Vec::new(),
        choices: Vec::new(),
        word_count,
    };
    if words.is_empty() {
        return out;
    }

    let expected = word_count as f64 * MASK_RATE;
    let mut target = expected.floor() as usize;
    if rng.gen_bool(expected.fract()) {
        target += 1;
    }
    let target = target.max(1);

    let first_word = words[0].clone();
    words.shuffle(rng);
    let mut selected: Vec<Vec<usize>> = Vec::new();
    let mut n_positions = 0;
    for w in words {
        if selected.len() == target {
            break;
        }
        if n_positions + w.len() > MAX_PREDICTIONS {
            continue;
        }
        n_positions += w.len();
        selected.push(w);
    }
    if selected.is_empty() {
        // every word is longer than the prediction cap
        selected.push(first_word.into_iter().take(MAX_PREDICTIONS).collect());
    }

    let can_randomize = vocab_size > NUM_SPECIAL;
    for w in &selected {
        let roll: f64 = rng.gen();
        let choice = if roll < 0.8 {
            MaskChoice::Mask
        } else if roll < 0.9 {
            MaskChoice::Random
        } else {
            MaskChoice::Keep
        };
        for &p in w {
            match choice {
                MaskChoice::Mask => out.ids[p] = MASK_ID,
                MaskChoice::Random if can_randomize => {
                    out.ids[p] = rng.gen_range(NUM_SPECIAL as u32..vocab_size as u32)
                }
                _ => {}
            }
            out.positions.push(p);
        }
        out.choices.push(choice);
    }
    out.positions.sort_unstable();
    out.labels = out.positions.iter().map(|&p| seq.ids[p]).collect();
    out
}

/// [`mask_tokens`] with a freshly seeded generator.
pub fn mask_sequence(seq: &TokenSequence, vocab_size: usize, seed: u64) -> MaskedSequence {
    mask_tokens(seq, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32], starts: &[bool]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            word_start: starts.to_vec(),
        }
    }

    #[test]
    fn single_word_forced() {
        let s = seq(&[CLS_ID, 10, SEP_ID], &[true, true, true]);
        for seed in 0..20 {
            let m = mask_sequence(&s, 100, seed);
            assert_eq!(m.positions, [1]);
            assert_eq!(m.labels, [10]);
            assert_eq!(m.word_count, 1);
        }
    }

    #[test]
    fn multi_piece_word_contiguous() {
        let s = seq(
            &[CLS_ID, 10, 11, 12, SEP_ID],
            &[true, true, false, false, true],
        );
        let m = mask_sequence(&s, 100, 3);
        assert_eq!(m.positions, [1, 2, 3]);
        assert_eq!(m.labels, [10, 11, 12]);
        assert_eq!(m.choices.len(), 1);
        if m.choices[0] == MaskChoice::Mask {
            assert_eq!(&m.ids[1..4], &[MASK_ID; 3]);
        }
    }

    #[test]
    fn never_touches_specials() {
        let ids: Vec<u32> = std::iter::once(CLS_ID)
            .chain((0..60).map(|i| 5 + i % 40))
            .chain([SEP_ID, PAD_ID, PAD_ID])
            .collect();
        let s = seq(&ids, &vec![true; ids.len()]);
        for seed in 0..200 {
            let m = mask_sequence(&s, 45, seed);
            assert!(m.positions.len() <= MAX_PREDICTIONS);
            assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
            for &p in &m.positions {
                assert!(maskable(ids[p]));
            }
        }
    }

    #[test]
    fn no_maskable_words() {
        let s = seq(&[CLS_ID, SEP_ID, SEP_ID], &[true; 3]);
        let m = mask_sequence(&s, 100, 0);
        assert!(m.positions.is_empty());
    }

    #[test]
    fn oversized_word_truncated_to_cap() {
        let n = MAX_PREDICTIONS + 3;
        let ids: Vec<u32> = (0..n as u32).map(|i| 10 + i).collect();
        let mut starts = vec![false; n];
        starts[0] = true;
        let m = mask_sequence(&seq(&ids, &starts), 100, 0);
        assert_eq!(m.positions, (0..MAX_PREDICTIONS).collect::<Vec<_>>());
    }
}
