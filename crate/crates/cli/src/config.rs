//! Run configuration: a JSON file merged with command-line flags.
//!
//! Every knob is optional in both sources. Flags are turned into the same
//! shape as the file, overlaid key by key (a present flag always wins), and
//! whatever is still missing takes the built-in default. The result is what
//! gets recorded, and hashed, in each run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dapt_core::eval::FinetuneConfig;
use dapt_core::examples::GenerateConfig;
use dapt_core::model::ModelConfig;
use dapt_core::train::TrainConfig;
use dapt_core::util::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DEFAULT_SEED: u64 = 12345;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;
pub const DEFAULT_VOCAB_SIZE: usize = 30_000;
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw tweets, one JSON object per line.
    pub corpus: Option<PathBuf>,
    /// Sentence documents written by `prep`.
    pub docs: Option<PathBuf>,
    pub rejects: Option<PathBuf>,
    pub emoji_table: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub shards: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub datasets: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_seq: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub eval_interval: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    /// Unset means the per-dataset epoch policy.
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub dedup_threshold: Option<f64>,
    pub vocab_size: Option<usize>,
    pub dupe_factor: Option<usize>,
    pub num_shards: Option<usize>,
    pub valid_fraction: Option<f64>,
    pub repeats: Option<usize>,
    /// One seed for every stage: example generation, model init, batch
    /// order, finetuning (repeat `r` uses `seed + r`).
    pub seed: Option<u64>,
}

fn fill<T>(slot: &mut Option<T>, default: T) {
    if slot.is_none() {
        *slot = Some(default);
    }
}

impl RunConfig {
    /// Reads a config file. A run manifest is accepted too, so a recorded
    /// run can be repeated with `--config <manifest>`.
    pub fn load(path: &Path) -> Result<Value, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if value.get("config_hash").is_some() {
            value = value["config"].take();
        }
        // validate the shape (unknown keys, wrong types) up front
        serde_json::from_value::<RunConfig>(value.clone())
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(value)
    }

    /// Overlays `flags` on the file config, then applies defaults.
    pub fn merge(file: Option<Value>, flags: &RunConfig) -> Result<RunConfig, CliError> {
        let mut merged = file.unwrap_or(Value::Object(Default::default()));
        overlay(
            &mut merged,
            serde_json::to_value(flags).expect("config serializes"),
        );
        let cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg.with_defaults())
    }

    pub fn with_defaults(mut self) -> Self {
        let desk = ModelConfig::desk(0);
        let m = &mut self.model;
        fill(&mut m.layers, desk.layers);
        fill(&mut m.hidden, desk.hidden);
        fill(&mut m.heads, desk.heads);
        fill(&mut m.ff_dim, desk.ff_dim);
        fill(&mut m.max_seq, desk.max_seq);

        let tc = TrainConfig::default();
        let t = &mut self.train;
        fill(&mut t.learning_rate, tc.learning_rate);
        fill(&mut t.batch_size, tc.batch_size);
        fill(&mut t.total_steps, tc.total_steps);
        fill(&mut t.checkpoint_interval, tc.checkpoint_interval);
        fill(&mut t.eval_interval, tc.eval_interval);

        let fc = FinetuneConfig::default();
        fill(&mut self.finetune.learning_rate, fc.learning_rate);
        fill(&mut self.finetune.batch_size, fc.batch_size);

        let gc = GenerateConfig::default();
        fill(&mut self.dedup_threshold, DEFAULT_DEDUP_THRESHOLD);
        fill(&mut self.vocab_size, DEFAULT_VOCAB_SIZE);
        fill(&mut self.dupe_factor, gc.dupe_factor);
        fill(&mut self.num_shards, gc.num_shards);
        fill(&mut self.valid_fraction, gc.valid_fraction);
        fill(&mut self.repeats, DEFAULT_REPEATS);
        fill(&mut self.seed, DEFAULT_SEED);
        self
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    // The accessors below assume `with_defaults` has run.

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers.unwrap(),
            hidden: m.hidden.unwrap(),
            heads: m.heads.unwrap(),
            ff_dim: m.ff_dim.unwrap(),
            vocab_size,
            max_seq: m.max_seq.unwrap(),
            seed: self.seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate.unwrap(),
            batch_size: t.batch_size.unwrap(),
            total_steps: t.total_steps.unwrap(),
            checkpoint_interval: t.checkpoint_interval.unwrap(),
            eval_interval: t.eval_interval.unwrap(),
            seed: self.seed(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            learning_rate: self.finetune.learning_rate.unwrap(),
            batch_size: self.finetune.batch_size.unwrap(),
            epochs: self.finetune.epochs,
        }
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            dupe_factor: self.dupe_factor.unwrap(),
            seed: self.seed(),
            num_shards: self.num_shards.unwrap(),
            valid_fraction: self.valid_fraction.unwrap(),
            ..GenerateConfig::default()
        }
    }
}

/// Recursive merge; nulls in `top` leave `base` untouched.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                overlay(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Returns the path or a usage error naming the flag that supplies it.
pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {flag} (or the matching config path)")))
}

/// Inputs must exist before any work starts.
pub fn require_input<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = require(path, flag)?;
    if !p.exists() {
        return Err(CliError::Data(format!(
            "input {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overlay_skips_nulls_and_recurses() {
        let mut base = json!({"a": 1, "n": {"x": 1, "y": 2}});
        overlay(
            &mut base,
            json!({"a": null, "n": {"y": 5, "z": null}, "b": 3}),
        );
        assert_eq!(base, json!({"a": 1, "n": {"x": 1, "y": 5}, "b": 3}));
    }

    #[test]
    fn defaults_fill_everything_but_epochs_and_paths() {
        let cfg = RunConfig::merge(None, &RunConfig::default()).unwrap();
        assert_eq!(cfg.seed, Some(DEFAULT_SEED));
        assert_eq!(
            cfg.train_config(),
            TrainConfig {
                seed: DEFAULT_SEED,
                ..Default::default()
            }
        );
        assert_eq!(
            cfg.model_config(9),
            ModelConfig {
                seed: DEFAULT_SEED,
                ..ModelConfig::desk(9)
            }
        );
        assert_eq!(cfg.finetune.epochs, None);
        assert_eq!(cfg.paths, Paths::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::merge(None, &RunConfig::default()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(1);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"learning_rat": 1}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(CliError::Usage(_))));
    }
}
