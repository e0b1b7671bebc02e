use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{finetune, EvalError, EvalReport, FinetuneConfig, LabeledDataset};
use crate::model::{load_checkpoint, read_manifest};
use crate::tokenizer::Vocabulary;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixCheckpoint {
    pub step: u64,
    pub path: PathBuf,
}

/// Checkpoint directories under `dir` (or `dir` itself), ordered by step.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<MatrixCheckpoint>, EvalError> {
    let consider = |path: PathBuf, found: &mut Vec<MatrixCheckpoint>| -> Result<(), EvalError> {
        if path.join(crate::model::CHECKPOINT_MANIFEST).is_file() {
            let m = read_manifest(&path)?;
            found.push(MatrixCheckpoint { step: m.step, path });
        }
        Ok(())
    };
    let mut found = Vec::new();
    consider(dir.to_path_buf(), &mut found)?;
    if found.is_empty() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                consider(path, &mut found)?;
            }
        }
    }
    if found.is_empty() {
        return Err(EvalError::NoCheckpoints(dir.to_path_buf()));
    }
    found.sort_by(|a, b| a.step.cmp(&b.step).then_with(|| a.path.cmp(&b.path)));
    if let Some(w) = found.windows(2).find(|w| w[0].step == w[1].step) {
        return Err(EvalError::DuplicateStep(w[0].step));
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub repeats: usize,
    pub base_seed: u64,
    pub finetune: FinetuneConfig,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            repeats: 10,
            base_seed: 0,
            finetune: FinetuneConfig::default(),
        }
    }
}

/// One finished finetuning run, as persisted in the cell state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub checkpoint_step: u64,
    pub dataset: String,
    pub repeat: usize,
    pub seed: u64,
    pub f1: f64,
    /// Hash of everything the result depends on; stale cells are rerun.
    pub key: String,
}

fn read_state(path: &Path) -> Result<HashMap<String, CellResult>, EvalError> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CellResult>(&line) {
            Ok(c) => {
                out.insert(c.key.clone(), c);
            }
            // a torn final line from an interrupted run is simply redone
            Err(e) if e.is_eof() => log::warn!("event=torn_state_line line={}", i + 1),
            Err(e) => {
                return Err(EvalError::State {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Finetunes every checkpoint on every dataset `repeats` times (seed
/// `base_seed + repeat`) and aggregates the dev macro-F1s.
///
/// With a `state` path, each finished cell is appended there as a JSON line
/// and cells already present (with a matching key) are not rerun. Cells of a
/// checkpoint run in parallel; this function is the only writer.
pub fn run_matrix(
    checkpoints: &[MatrixCheckpoint],
    datasets: &[LabeledDataset],
    vocab: &Vocabulary,
    cfg: &MatrixConfig,
    state: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    if cfg.repeats < 2 {
        return Err(EvalError::TooFewRepeats(cfg.repeats));
    }
    if datasets.is_empty() {
        return Err(EvalError::NoDatasets);
    }
    if !checkpoints.iter().any(|c| c.step == 0) {
        return Err(EvalError::MissingBaseline);
    }
    cfg.finetune.validate()?;
    let mut steps: Vec<u64> = checkpoints.iter().map(|c| c.step).collect();
    steps.sort_unstable();
    if let Some(w) = steps.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::DuplicateStep(w[0]));
    }

    let done = match state {
        Some(p) => read_state(p)?,
        None => HashMap::new(),
    };
    let writer = match state {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            // close off a torn final line so the next cell starts fresh
            let torn = fs::read(p)?.last().is_some_and(|&b| b != b'\n');
            if torn {
                f.write_all(b"\n")?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };
    let ft_json = serde_json::to_string(&cfg.finetune).expect("config serializes");
    let fingerprints: Vec<String> = datasets.iter().map(|d| d.fingerprint()).collect();

    let mut results: Vec<CellResult> = Vec::new();
    for ck in checkpoints {
        let tensors = read_manifest(&ck.path)?.tensors_sha256;
        let mut pending = Vec::new();
        for d in 0..datasets.len() {
            for r in 0..cfg.repeats {
                let seed = cfg.base_seed + r as u64;
                let key = sha256_hex(
                    format!("{tensors}|{}|{ft_json}|{seed}|{}", fingerprints[d], ck.step)
                        .as_bytes(),
                );
                match done.get(&key) {
                    Some(c) => results.push(c.clone()),
                    None => pending.push((d, r, seed, key)),
                }
            }
        }
        if pending.is_empty() {
            continue;
        }
        let loaded = load_checkpoint(&ck.path)?;
        let fresh: Vec<CellResult> = pending
            .into_par_iter()
            .map(|(d, r, seed, key)| {
                let ds = &datasets[d];
                let res = finetune(&loaded, vocab, ds, &cfg.finetune, seed)?;
                let cell = CellResult {
                    checkpoint_step: ck.step,
                    dataset: ds.name.clone(),
                    repeat: r,
                    seed,
                    f1: res.macro_f1,
                    key,
                };
                if let Some(w) = &writer {
                    let mut line = serde_json::to_string(&cell).expect("cell serializes");
                    line.push('\n');
                    let mut f = w.lock().expect("state writer poisoned");
                    f.write_all(line.as_bytes())?;
                    f.flush()?;
                }
                log::info!(
                    "event=cell step={} dataset={} repeat={} seed={} f1={}",
                    cell.checkpoint_step,
                    cell.dataset,
                    r,
                    seed,
                    cell.f1
                );
                Ok(cell)
            })
            .collect::<Result<_, EvalError>>()?;
        results.extend(fresh);
    }

    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    let mut grid: BTreeMap<(u64, String), Vec<(usize, f64)>> = BTreeMap::new();
    for c in &results {
        grid.entry((c.checkpoint_step, c.dataset.clone()))
            .or_default()
            .push((c.repeat, c.f1));
    }
    EvalReport::aggregate(&steps, &names, cfg.repeats, cfg.base_seed, &grid)
}
