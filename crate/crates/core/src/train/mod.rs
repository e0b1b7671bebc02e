//! Pretraining loop: shuffled batches, Adam at a constant learning rate,
//! periodic held-out metrics and checkpoints.
//!
//! The batch for step `s` depends only on `(seed, s)`: examples are visited in
//! a per-epoch permutation seeded by `(seed, epoch)`. Together with the
//! chunked, order-preserving gradient reduction this makes a run resumed
//! from any checkpoint bitwise identical to an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::{GenerateError, PretrainExample, ShardError, ShardSet};
use crate::model::{
    evaluate, gradients, init_params, load_checkpoint, save_checkpoint, Adam, AdamState,
    Checkpoint, CheckpointError, ConfigError, ModelConfig, ModelError, Parameters,
};
use crate::util::write_atomic;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            total_steps: 2500,
            checkpoint_interval: 500,
            eval_interval: 100,
            seed: 12345,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("total_steps", self.total_steps),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_interval", self.eval_interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.checkpoint_interval > self.total_steps {
            return bad(format!(
                "checkpoint_interval {} exceeds total_steps {}",
                self.checkpoint_interval, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Held-out metrics after `step` optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub step: u64,
    pub mlm_loss: f64,
    pub mlm_acc: f64,
    pub nsp_loss: f64,
    pub nsp_acc: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    ModelConfig(#[from] ConfigError),
    #[error("no training examples")]
    NoTrainData,
    #[error("no held-out examples")]
    NoValidData,
    #[error("shard geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-finite loss or parameters at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error("metrics log: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training and held-out examples, fully in memory.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub train: Vec<PretrainExample>,
    pub valid: Vec<PretrainExample>,
    /// Vocabulary size the examples were encoded with, if known.
    pub vocab_size: Option<usize>,
}

impl PretrainData {
    pub fn from_shards(set: &ShardSet) -> Result<Self, TrainError> {
        Ok(PretrainData {
            train: set.read_train()?,
            valid: set.read_valid()?,
            vocab_size: Some(set.manifest.vocab_size),
        })
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), TrainError> {
        if self.train.is_empty() {
            return Err(TrainError::NoTrainData);
        }
        if self.valid.is_empty() {
            return Err(TrainError::NoValidData);
        }
        if let Some(v) = self.vocab_size {
            if v != cfg.vocab_size {
                return Err(TrainError::Geometry(format!(
                    "shards use vocab_size {v}, model has {}",
                    cfg.vocab_size
                )));
            }
        }
        if cfg.max_seq < crate::SEQ_LEN {
            return Err(TrainError::Geometry(format!(
                "model max_seq {} is shorter than the example length {}",
                cfg.max_seq,
                crate::SEQ_LEN
            )));
        }
        Ok(())
    }
}

/// Where a run begins.
#[derive(Debug, Clone)]
pub enum Start {
    Fresh(ModelConfig),
    Resume(PathBuf),
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    /// Points computed by this invocation (a resumed run starts after the
    /// checkpoint's step).
    pub metrics: Vec<MetricsPoint>,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step{step:06}"))
}

/// Yields the batch for each step; deterministic in `(seed, step)`.
struct BatchPlan {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl BatchPlan {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchPlan {
            n,
            batch,
            seed,
            epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    fn indices(&mut self, step: u64) -> Vec<usize> {
        let start = step as u128 * self.batch as u128;
        (0..self.batch as u128)
            .map(|j| {
                let p = start + j;
                let epoch = (p / self.n as u128) as u64;
                if epoch != self.epoch {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(epoch);
                    self.perm = (0..self.n).collect();
                    self.perm.shuffle(&mut rng);
                    self.epoch = epoch;
                }
                self.perm[(p % self.n as u128) as usize]
            })
            .collect()
    }
}

fn held_out(
    params: &Parameters,
    valid: &[PretrainExample],
    step: u64,
) -> Result<MetricsPoint, TrainError> {
    let l = evaluate(params, valid)?;
    Ok(MetricsPoint {
        step,
        mlm_loss: l.mlm_loss,
        mlm_acc: l.mlm_acc,
        nsp_loss: l.nsp_loss,
        nsp_acc: l.nsp_acc,
    })
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsPoint>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainError::Metrics(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a metrics log written by [`pretrain`].
pub fn load_metrics(out_dir: &Path) -> Result<Vec<MetricsPoint>, TrainError> {
    read_metrics(&out_dir.join(METRICS_FILE))
}

fn metrics_line(m: &MetricsPoint) -> String {
    let mut s = serde_json::to_string(m).expect("metrics serialize");
    s.push('\n');
    s
}

fn save(
    params: &Parameters,
    adam: Adam,
    state: &AdamState,
    step: u64,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf, TrainError> {
    let dir = checkpoint_dir(out_dir, step);
    save_checkpoint(
        &Checkpoint {
            params: params.clone(),
            optimizer: adam,
            state: state.clone(),
            step,
            metadata: serde_json::json!({ "train": cfg }),
        },
        &dir,
    )?;
    log::info!("event=checkpoint step={step} path={}", dir.display());
    Ok(dir)
}

/// Runs (or resumes) pretraining, writing `stepNNNNNN/` checkpoints and
/// `metrics.jsonl` under `out_dir`.
///
/// A fresh run checkpoints the untrained model at step 0. Checkpoints follow
/// every `checkpoint_interval` updates and at `total_steps`; held-out
/// metrics every `eval_interval` updates, at step 0 and at the end. If a
/// loss or parameter turns non-finite the run stops with
/// [`TrainError::NonFinite`]; checkpoints already written are untouched.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &PretrainData,
    start: Start,
    out_dir: &Path,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let adam = Adam::new(cfg.learning_rate);

    let (mut params, mut state, first_step) = match start {
        Start::Fresh(mc) => {
            mc.validate()?;
            data.check(&mc)?;
            (init_params(&mc)?, AdamState::new(&mc), 0)
        }
        Start::Resume(dir) => {
            let ck = load_checkpoint(&dir)?;
            data.check(&ck.params.config)?;
            if let Some(prev) = ck.metadata.get("train") {
                let prev: TrainConfig = serde_json::from_value(prev.clone())
                    .map_err(|e| TrainError::Resume(format!("checkpoint train config: {e}")))?;
                if prev.learning_rate != cfg.learning_rate
                    || prev.batch_size != cfg.batch_size
                    || prev.seed != cfg.seed
                {
                    return Err(TrainError::Resume(format!(
                        "checkpoint was trained with lr={} batch={} seed={}",
                        prev.learning_rate, prev.batch_size, prev.seed
                    )));
                }
            }
            if ck.step > cfg.total_steps {
                return Err(TrainError::Resume(format!(
                    "checkpoint step {} is past total_steps {}",
                    ck.step, cfg.total_steps
                )));
            }
            (ck.params, ck.state, ck.step)
        }
    };

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    if first_step == 0 {
        let m = held_out(&params, &data.valid, 0)?;
        log::info!(
            "event=eval step=0 mlm_loss={} mlm_acc={} nsp_loss={} nsp_acc={}",
            m.mlm_loss,
            m.mlm_acc,
            m.nsp_loss,
            m.nsp_acc
        );
        write_atomic(&metrics_path, metrics_line(&m).as_bytes())?;
        metrics.push(m);
        checkpoints.push(save(&params, adam, &state, 0, cfg, out_dir)?);
    } else {
        // drop anything logged after the checkpoint we resume from
        let kept: String = read_metrics(&metrics_path)?
            .iter()
            .filter(|m| m.step <= first_step)
            .map(metrics_line)
            .collect();
        write_atomic(&metrics_path, kept.as_bytes())?;
    }
    let mut last_good = Some(checkpoint_dir(out_dir, first_step));

    let mut plan = BatchPlan::new(data.train.len(), cfg.batch_size, cfg.seed);
    let mut log = OpenOptions::new().append(true).open(&metrics_path)?;
    for step in first_step..cfg.total_steps {
        let batch: Vec<PretrainExample> = plan
            .indices(step)
            .into_iter()
            .map(|i| data.train[i].clone())
            .collect();
        let (losses, grads) = match gradients(&params, &batch) {
            Ok(r) => r,
            Err(ModelError::NonFinite { stage }) => {
                log::error!("event=non_finite step={step} stage={stage:?}");
                return Err(TrainError::NonFinite {
                    step,
                    last_checkpoint: last_good,
                });
            }
            Err(e) => return Err(e.into()),
        };
        adam.step(&mut params, &grads, &mut state);
        let done = step + 1;
        // f32 moments can overflow (g² past f32::MAX) before the weights do
        let finite = losses.total().is_finite()
            && params.all_finite()
            && state.m.all_finite()
            && state.v.all_finite();
        if !finite {
            log::error!("event=non_finite step={done}");
            return Err(TrainError::NonFinite {
                step: done,
                last_checkpoint: last_good,
            });
        }
        let last = done == cfg.total_steps;
        if done % cfg.eval_interval == 0 || last {
            let m = match held_out(&params, &data.valid, done) {
                Err(TrainError::Model(ModelError::NonFinite { .. })) => {
                    return Err(TrainError::NonFinite {
                        step: done,
                        last_checkpoint: last_good,
                    })
                }
                r => r?,
            };
            log::info!(
                "event=eval step={done} train_loss={} mlm_loss={} mlm_acc={} nsp_loss={} nsp_acc={}",
                losses.total(),
                m.mlm_loss,
                m.mlm_acc,
                m.nsp_loss,
                m.nsp_acc
            );
            log.write_all(metrics_line(&m).as_bytes())?;
            log.flush()?;
            metrics.push(m);
        }
        if done % cfg.checkpoint_interval == 0 || last {
            let dir = save(&params, adam, &state, done, cfg, out_dir)?;
            last_good = Some(dir.clone());
            checkpoints.push(dir);
        }
    }
    let final_checkpoint = checkpoint_dir(out_dir, cfg.total_steps);
    Ok(PretrainOutcome {
        final_checkpoint,
        final_step: cfg.total_steps,
        checkpoints,
        metrics,
    })
}
