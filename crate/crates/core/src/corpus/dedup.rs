//! Exact and near-duplicate removal.
//!
//! Near duplicates are defined by Jaccard similarity over word 3-gram
//! shingles. A 128-hash MinHash signature with LSH banding proposes candidate
//! survivors; every candidate is verified with the exact Jaccard, so the index
//! only affects speed. Band width is chosen per threshold so that a pair at or
//! above the threshold escapes the index with probability below 1e-12; when
//! no banding meets that bound (very low thresholds) every survivor is
//! checked directly.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CleanTweet;
use crate::util::fnv1a64;

pub const NUM_HASHES: usize = 128;
const SHINGLE: usize = 3;
const MERSENNE_61: u64 = (1 << 61) - 1;
const MAX_MISS_PROBABILITY: f64 = 1e-12;
const SIGNATURE_SEED: u64 = 0x5eed_d3d0_0000_0001;

/// Hashed word 3-gram shingles. Texts shorter than three words form a single
/// shingle of all their words; empty text has no shingles.
pub fn word_shingles(text: &str) -> HashSet<u64> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return HashSet::new();
    }
    if words.len() < SHINGLE {
        return HashSet::from([fnv1a64(words.join(" ").as_bytes())]);
    }
    words
        .windows(SHINGLE)
        .map(|w| fnv1a64(w.join(" ").as_bytes()))
        .collect()
}

/// Jaccard similarity of two shingle sets. Two empty sets count as identical.
pub fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Retweet,
    ExactDuplicate,
    NearDuplicate,
}

/// Streaming deduplicator: the first occurrence always survives.
pub struct Deduplicator {
    threshold: f64,
    rows_per_band: Option<usize>,
    coeffs: Vec<(u64, u64)>,
    exact: HashSet<String>,
    bands: Vec<HashMap<u64, Vec<usize>>>,
    survivors: Vec<HashSet<u64>>,
}

impl Deduplicator {
    /// # Panics
    /// If `threshold` is outside `[0, 1]`.
    pub fn new(threshold: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&threshold),
            "near-duplicate threshold must be in [0, 1], got {threshold}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
        let coeffs = (0..NUM_HASHES)
            .map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61)))
            .collect();
        let rows_per_band = choose_rows_per_band(threshold);
        let n_bands = rows_per_band.map_or(0, |r| NUM_HASHES / r);
        Deduplicator {
            threshold,
            rows_per_band,
            coeffs,
            exact: HashSet::new(),
            bands: vec![HashMap::new(); n_bands],
            survivors: Vec::new(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// LSH rows per band, or `None` when every survivor is scanned.
    pub fn rows_per_band(&self) -> Option<usize> {
        self.rows_per_band
    }

    pub fn survivor_count(&self) -> usize {
        self.survivors.len()
    }

    /// Classifies `tweet` against everything kept so far and, if it survives,
    /// adds it to the index.
    pub fn admit(&mut self, tweet: &CleanTweet) -> Verdict {
        if tweet.was_retweet {
            return Verdict::Retweet;
        }
        if self.exact.contains(&tweet.text) {
            return Verdict::ExactDuplicate;
        }
        let shingles = word_shingles(&tweet.text);
        if self.threshold <= 0.0 && !self.survivors.is_empty() {
            return Verdict::NearDuplicate;
        }
        let signature = self.rows_per_band.map(|_| self.signature(&shingles));
        let is_near = match (&signature, self.rows_per_band) {
            (Some(sig), Some(rows)) => {
                let mut seen = HashSet::new();
                self.bands.iter().enumerate().any(|(b, table)| {
                    let key = band_key(&sig[b * rows..(b + 1) * rows]);
                    table.get(&key).is_some_and(|ids| {
                        ids.iter().any(|&id| {
                            seen.insert(id)
                                && jaccard(&shingles, &self.survivors[id]) >= self.threshold
                        })
                    })
                })
            }
            _ => self
                .survivors
                .iter()
                .any(|s| jaccard(&shingles, s) >= self.threshold),
        };
        if is_near {
            return Verdict::NearDuplicate;
        }

        let id = self.survivors.len();
        if let (Some(sig), Some(rows)) = (signature, self.rows_per_band) {
            for (b, table) in self.bands.iter_mut().enumerate() {
                let key = band_key(&sig[b * rows..(b + 1) * rows]);
                table.entry(key).or_default().push(id);
            }
        }
        self.survivors.push(shingles);
        self.exact.insert(tweet.text.clone());
        Verdict::Keep
    }

    fn signature(&self, shingles: &HashSet<u64>) -> Vec<u64> {
        self.coeffs
            .iter()
            .map(|&(a, b)| {
                shingles
                    .iter()
                    .map(|&x| {
                        let x = x % MERSENNE_61;
                        ((u128::from(a) * u128::from(x) + u128::from(b)) % u128::from(MERSENNE_61))
                            as u64
                    })
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }
}

fn band_key(rows: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(rows.len() * 8);
    for r in rows {
        bytes.extend_from_slice(&r.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Widest band whose miss probability at `threshold` stays under the bound.
fn choose_rows_per_band(threshold: f64) -> Option<usize> {
    if threshold <= 0.0 {
        return None;
    }
    [32usize, 16, 8, 4, 2, 1].into_iter().find(|&rows| {
        let bands = (NUM_HASHES / rows) as i32;
        (1.0 - threshold.powi(rows as i32)).powi(bands) <= MAX_MISS_PROBABILITY
    })
}

/// Drops retweets, exact duplicates and near duplicates (shingle Jaccard at or
/// above `threshold`), keeping first occurrences in stream order.
pub fn dedup_corpus<I>(tweets: I, threshold: f64) -> impl Iterator<Item = CleanTweet>
where
    I: IntoIterator<Item = CleanTweet>,
{
    let mut dedup = Deduplicator::new(threshold);
    tweets
        .into_iter()
        .filter(move |t| dedup.admit(t) == Verdict::Keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tweet(id: &str, text: &str) -> CleanTweet {
        CleanTweet {
            id: id.into(),
            text: text.into(),
            was_retweet: false,
        }
    }

    fn ids(v: Vec<CleanTweet>) -> Vec<String> {
        v.into_iter().map(|t| t.id).collect()
    }

    #[test]
    fn exact_duplicate_first_kept() {
        let input = vec![
            tweet("a", "x y z w v"),
            tweet("b", "x y z w v"),
            tweet("c", "q r s t u"),
        ];
        assert_eq!(ids(dedup_corpus(input, 0.8).collect()), ["a", "c"]);
    }

    #[test]
    fn retweets_removed() {
        let mut rt = tweet("r", "something unique here");
        rt.was_retweet = true;
        let out: Vec<_> = dedup_corpus(vec![rt, tweet("k", "kept")], 0.8).collect();
        assert_eq!(ids(out), ["k"]);
    }

    #[test]
    fn threshold_one_keeps_distinct() {
        let input: Vec<_> = (0..50)
            .map(|i| tweet(&i.to_string(), &format!("word{i} common tail of text")))
            .collect();
        assert_eq!(dedup_corpus(input.clone(), 1.0).count(), input.len());
    }

    #[test]
    fn threshold_zero_keeps_first_only() {
        let input = vec![tweet("a", "one two three"), tweet("b", "four five six")];
        assert_eq!(ids(dedup_corpus(input, 0.0).collect()), ["a"]);
    }

    #[test]
    fn jaccard_basics() {
        let a = word_shingles("a b c d");
        let b = word_shingles("a b c e");
        assert_eq!(a.len(), 2);
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(word_shingles("hi there").len(), 1);
        assert_eq!(jaccard(&HashSet::new(), &HashSet::new()), 1.0);
    }

    #[test]
    fn band_choice_bounds_miss_probability() {
        for t in [0.3, 0.5, 0.7, 0.8, 0.9, 1.0] {
            let rows = choose_rows_per_band(t).unwrap();
            let miss = (1.0 - t.powi(rows as i32)).powi((NUM_HASHES / rows) as i32);
            assert!(miss <= MAX_MISS_PROBABILITY, "t={t} rows={rows}");
        }
        assert_eq!(choose_rows_per_band(0.05), None);
    }

    #[test]
    #[should_panic]
    fn rejects_bad_threshold() {
        Deduplicator::new(1.5);
    }
}
