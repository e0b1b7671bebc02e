//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` is a sequence of little-endian records
//! `u32 name_len | name | u32 rank | rank x u64 dims | f32 data (row-major)`,
//! holding the parameters followed by the Adam moments (`adam.m.*`,
//! `adam.v.*`). The manifest records the blob's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ModelConfig;
use super::optim::{Adam, AdamState};
use super::params::{Parameters, Params, Tensor};
use crate::util::{sha256_hex, write_atomic};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config {found:?} differs from expected {expected:?}")]
    ConfigMismatch {
        expected: ModelConfig,
        found: ModelConfig,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor blob truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("tensor blob checksum mismatch")]
    Checksum,
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub adam_step: u64,
    pub config: ModelConfig,
    pub optimizer: Adam,
    pub parameter_count: usize,
    pub tensor_count: usize,
    pub tensors_sha256: String,
    /// Free-form provenance (training config, seeds) kept by the caller.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optimizer: Adam,
    pub state: AdamState,
    pub step: u64,
    pub metadata: serde_json::Value,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in &t.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn all_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out = ck.params.named_tensors();
    out.extend(
        ck.state
            .m
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("adam.m.{n}"), t)),
    );
    out.extend(
        ck.state
            .v
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("adam.v.{n}"), t)),
    );
    out
}

/// Writes `dir/tensors.bin` then `dir/manifest.json`, each atomically.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let tensors = all_tensors(ck);
    for (name, t) in &tensors {
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(name.clone()));
        }
    }
    let mut blob = Vec::new();
    for (name, t) in &tensors {
        push_tensor(&mut blob, name, t);
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step: ck.step,
        adam_step: ck.state.step,
        config: ck.params.config.clone(),
        optimizer: ck.optimizer,
        parameter_count: ck.params.parameter_count(),
        tensor_count: tensors.len(),
        tensors_sha256: sha256_hex(&blob),
        metadata: ck.metadata.clone(),
    };
    write_atomic(&dir.join(TENSORS_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_blob(buf: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>, CheckpointError> {
    let mut cur = Cursor { buf, pos: 0 };
    let mut out = BTreeMap::new();
    while cur.pos < buf.len() {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("tensor name at byte {}", cur.pos)))?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| {
                CheckpointError::Corrupt(format!("tensor {name}: dimension overflow"))
            })?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name}: size overflow")))?;
        let data = cur
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

fn fill(
    target: &mut Params<f32>,
    prefix: &str,
    found: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<(), CheckpointError> {
    for (name, slot) in target.named_tensors_mut() {
        let key = format!("{prefix}{name}");
        let t = found
            .remove(&key)
            .ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
        if t.shape != slot.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: key,
                expected: slot.shape.clone(),
                found: t.shape,
            });
        }
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(key));
        }
        *slot = t;
    }
    Ok(())
}

/// Loads a checkpoint directory; tensor shapes are validated against the
/// manifest's config.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    load_checkpoint_with(dir, None)
}

/// Like [`load_checkpoint`], but tensor shapes must also match `expected`
/// (the config the caller intends to run with).
pub fn load_checkpoint_with(
    dir: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, CheckpointError> {
    let raw = fs::read(dir.join(MANIFEST_FILE))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Corrupt("manifest lacks format_version".into()))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(CheckpointError::Version {
            found: found as u32,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(value)?;
    manifest
        .config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(format!("manifest config: {e}")))?;
    let blob = fs::read(dir.join(TENSORS_FILE))?;
    let mut tensors = parse_blob(&blob)?;
    if sha256_hex(&blob) != manifest.tensors_sha256 {
        return Err(CheckpointError::Checksum);
    }
    let config = expected.unwrap_or(&manifest.config);
    let mut params = Parameters::zeros_like(config);
    params.config = manifest.config.clone();
    fill(&mut params, "", &mut tensors)?;
    let mut state = AdamState::new(config);
    state.step = manifest.adam_step;
    fill(&mut state.m, "adam.m.", &mut tensors)?;
    fill(&mut state.v, "adam.v.", &mut tensors)?;
    if let Some(name) = tensors.into_keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name));
    }
    if let Some(exp) = expected {
        let mut theirs = manifest.config.clone();
        theirs.seed = exp.seed;
        if exp != &theirs {
            return Err(CheckpointError::ConfigMismatch {
                expected: exp.clone(),
                found: manifest.config.clone(),
            });
        }
    }
    state.m.config = manifest.config.clone();
    state.v.config = manifest.config.clone();
    Ok(Checkpoint {
        params,
        optimizer: manifest.optimizer,
        state,
        step: manifest.step,
        metadata: manifest.metadata,
    })
}

/// Reads only the manifest.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}
