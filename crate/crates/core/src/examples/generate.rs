use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::masking::mask_tokens;
use super::pairing::{encode_docs, pair_sentences, EncodedDoc, PairError, PairingOptions};
use super::shard::{ShardError, ShardReader, ShardWriter};
use super::{pair_layout, PretrainExample};
use crate::corpus::SentenceDoc;
use crate::tokenizer::Vocabulary;
use crate::util::{ensure_writable_dir, fnv1a64, write_atomic};
use crate::{MAX_PREDICTIONS, SEQ_LEN};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;
const HOLDOUT_BUCKETS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("output directory {path} is not writable: {source}")]
    Unwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("dupe factor must be at least 1")]
    DupeFactor,
    #[error("shard count must be at least 1")]
    ShardCount,
    #[error("validation fraction {0} outside [0, 1)")]
    ValidFraction(f64),
    #[error(transparent)]
    Pairing(#[from] PairError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub dupe_factor: usize,
    pub seed: u64,
    pub num_shards: usize,
    /// Fraction of documents held out for validation, chosen by id hash.
    pub valid_fraction: f64,
    pub pairing: PairingOptions,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            dupe_factor: 10,
            seed: 12345,
            num_shards: 4,
            valid_fraction: 0.01,
            pairing: PairingOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format_version: u32,
    /// Training shard file names, relative to the manifest.
    pub shards: Vec<String>,
    pub example_count: u64,
    pub valid_shards: Vec<String>,
    pub valid_example_count: u64,
    pub seed: u64,
    pub dupe_factor: usize,
    pub pass_seeds: Vec<u64>,
    pub examples_per_pass: u64,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub max_predictions: usize,
    pub train_docs: usize,
    pub valid_docs: usize,
}

/// A generated shard directory.
#[derive(Debug, Clone)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub manifest: ShardManifest,
}

impl ShardSet {
    pub fn paths(&self) -> Vec<PathBuf> {
        self.manifest
            .shards
            .iter()
            .map(|s| self.dir.join(s))
            .collect()
    }

    pub fn valid_paths(&self) -> Vec<PathBuf> {
        self.manifest
            .valid_shards
            .iter()
            .map(|s| self.dir.join(s))
            .collect()
    }

    pub fn example_count(&self) -> u64 {
        self.manifest.example_count
    }

    /// Loads a manifest and checks it against the shard headers.
    pub fn load(dir: &Path) -> Result<Self, GenerateError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: ShardManifest =
            serde_json::from_str(&text).map_err(|e| GenerateError::Manifest(e.to_string()))?;
        let set = ShardSet {
            dir: dir.to_path_buf(),
            manifest,
        };
        let sum = |paths: Vec<PathBuf>| -> Result<u64, GenerateError> {
            paths
                .iter()
                .map(|p| Ok(ShardReader::open(p)?.header_count()))
                .sum()
        };
        let train = sum(set.paths())?;
        let valid = sum(set.valid_paths())?;
        if train != set.manifest.example_count || valid != set.manifest.valid_example_count {
            return Err(GenerateError::Manifest(format!(
                "header counts {train}/{valid} disagree with manifest {}/{}",
                set.manifest.example_count, set.manifest.valid_example_count
            )));
        }
        Ok(set)
    }

    pub fn read_train(&self) -> Result<Vec<PretrainExample>, ShardError> {
        read_all(&self.paths())
    }

    pub fn read_valid(&self) -> Result<Vec<PretrainExample>, ShardError> {
        read_all(&self.valid_paths())
    }
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<PretrainExample>, ShardError> {
    let mut out = Vec::new();
    for p in paths {
        for ex in ShardReader::open(p)? {
            out.push(ex?);
        }
    }
    Ok(out)
}

fn is_held_out(id: &str, fraction: f64) -> bool {
    let cut = (fraction * HOLDOUT_BUCKETS as f64).round() as u64;
    fnv1a64(id.as_bytes()) % HOLDOUT_BUCKETS < cut
}

/// Runs one pass: pairs every document, then masks each pair.
fn run_pass(
    docs: &[EncodedDoc],
    vocab_size: usize,
    opts: PairingOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainExample>, PairError> {
    let pairs = pair_sentences(docs, opts, rng)?;
    Ok(pairs
        .iter()
        .map(|pair| {
            let layout = pair_layout(pair);
            let masked = mask_tokens(&layout, vocab_size, rng);
            PretrainExample::assemble(pair, &masked)
        })
        .collect())
}

fn pass_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `dupe_factor` passes over the corpus into round-robin shards.
///
/// Pass `p` uses seed `seed + p`; training and validation draw from
/// different streams of that generator. The manifest is written last.
pub fn generate_shards(
    docs: &[SentenceDoc],
    vocab: &Vocabulary,
    config: &GenerateConfig,
    out_dir: &Path,
) -> Result<ShardSet, GenerateError> {
    ensure_writable_dir(out_dir).map_err(|source| GenerateError::Unwritable {
        path: out_dir.display().to_string(),
        source,
    })?;
    if config.dupe_factor == 0 {
        return Err(GenerateError::DupeFactor);
    }
    if config.num_shards == 0 {
        return Err(GenerateError::ShardCount);
    }
    if !(0.0..1.0).contains(&config.valid_fraction) {
        return Err(GenerateError::ValidFraction(config.valid_fraction));
    }

    let (valid_docs, train_docs): (Vec<SentenceDoc>, Vec<SentenceDoc>) = docs
        .iter()
        .cloned()
        .partition(|d| is_held_out(&d.id, config.valid_fraction));
    let train = encode_docs(&train_docs, vocab);
    let valid = encode_docs(&valid_docs, vocab);
    if train.len() < 2 {
        return Err(PairError::TooFewDocuments(train.len()).into());
    }
    if valid.len() < 2 && !valid.is_empty() {
        warn!(
            "event=valid_skipped reason=too_few_docs valid_docs={}",
            valid.len()
        );
    }

    let pass_seeds: Vec<u64> = (0..config.dupe_factor as u64)
        .map(|p| config.seed.wrapping_add(p))
        .collect();
    let passes: Vec<(Vec<PretrainExample>, Vec<PretrainExample>)> = pass_seeds
        .par_iter()
        .map(|&s| {
            let tr = run_pass(&train, vocab.len(), config.pairing, &mut pass_rng(s, 0))?;
            let va = if valid.len() >= 2 {
                run_pass(&valid, vocab.len(), config.pairing, &mut pass_rng(s, 1))?
            } else {
                Vec::new()
            };
            Ok((tr, va))
        })
        .collect::<Result<_, PairError>>()?;
    let examples_per_pass = passes[0].0.len() as u64;

    let shard_names: Vec<String> = (0..config.num_shards)
        .map(|i| format!("train-{i:05}.shard"))
        .collect();
    let mut writers = shard_names
        .iter()
        .map(|n| ShardWriter::create(&out_dir.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    let n_shards = writers.len();
    let mut k = 0;
    for (tr, _) in &passes {
        for ex in tr {
            writers[k % n_shards].write(ex)?;
            k += 1;
        }
    }
    let mut example_count = 0;
    for w in writers {
        example_count += w.finish()?;
    }

    let mut valid_shards = Vec::new();
    let mut valid_example_count = 0;
    if passes.iter().any(|(_, va)| !va.is_empty()) {
        let name = "valid-00000.shard".to_string();
        let mut w = ShardWriter::create(&out_dir.join(&name))?;
        for (_, va) in &passes {
            for ex in va {
                w.write(ex)?;
            }
        }
        valid_example_count = w.finish()?;
        valid_shards.push(name);
    }

    let manifest = ShardManifest {
        format_version: MANIFEST_VERSION,
        shards: shard_names,
        example_count,
        valid_shards,
        valid_example_count,
        seed: config.seed,
        dupe_factor: config.dupe_factor,
        pass_seeds,
        examples_per_pass,
        vocab_hash: vocab.hash(),
        vocab_size: vocab.len(),
        seq_len: SEQ_LEN,
        max_predictions: MAX_PREDICTIONS,
        train_docs: train.len(),
        valid_docs: valid.len(),
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| GenerateError::Manifest(e.to_string()))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &json)?;
    info!(
        "event=examples train={} valid={} passes={} shards={}",
        example_count, valid_example_count, config.dupe_factor, config.num_shards
    );
    Ok(ShardSet {
        dir: out_dir.to_path_buf(),
        manifest,
    })
}
