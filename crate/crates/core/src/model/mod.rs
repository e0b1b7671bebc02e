//! A small bidirectional transformer encoder with MLM and NSP heads.
//!
//! Parameters are stored as `f32`; every pass runs on an `f64` working copy
//! and gradients are exact (hand-written backpropagation). Batches are split
//! into fixed-size chunks processed in parallel and reduced in chunk order,
//! so results are bitwise reproducible regardless of thread count.

mod checkpoint;
pub(crate) mod classifier;
mod config;
pub(crate) mod encoder;
pub(crate) mod gradcheck;
mod linalg;
mod optim;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, read_manifest, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointManifest, CHECKPOINT_VERSION, MANIFEST_FILE as CHECKPOINT_MANIFEST,
    TENSORS_FILE as CHECKPOINT_TENSORS,
};
pub use classifier::{
    classifier_gradients, predict, ClassifierHead, ClassifierInput, HeadGradients,
};
pub use config::{ConfigError, ModelConfig};
pub use gradcheck::{
    grad_check, grad_check_encoder, relative_error, CoordinateCheck, GradCheckReport,
    GradObjective, LinearProbe, PretrainObjective, TensorCheck,
};
pub use optim::{Adam, AdamState};
pub use params::{
    init_params, truncated_normal, Gradients, LayerParams, Parameters, Params, Tensor, INIT_STD,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::PretrainExample;
use crate::MAX_PREDICTIONS;
use encoder::{pretrain_backward, pretrain_forward, softmax_xent, EncoderInput};

/// Examples per parallel work unit. Fixed so reductions never reorder.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} at example {example}, position {position} is outside vocab_size {vocab_size}")]
    TokenOutOfRange {
        example: usize,
        position: usize,
        id: u32,
        vocab_size: usize,
    },
    #[error("segment id above 1 at position {position}")]
    BadSegment { position: usize },
    #[error("masked position {position} beyond sequence length {len}")]
    MaskedPositionOutOfRange { position: usize, len: usize },
    #[error("label {label} at example {example} outside {classes} classes")]
    LabelOutOfRange {
        example: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch has no weighted masked slots; MLM loss is undefined")]
    NoMaskedSlots,
    #[error("non-finite values in {stage}")]
    NonFinite { stage: String },
    #[error("example {example}: {source}")]
    InExample {
        example: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ModelError {
    fn at(self, example: usize) -> Self {
        match self {
            ModelError::TokenOutOfRange {
                position,
                id,
                vocab_size,
                ..
            } => ModelError::TokenOutOfRange {
                example,
                position,
                id,
                vocab_size,
            },
            other => ModelError::InExample {
                example,
                source: Box::new(other),
            },
        }
    }
}

/// Pretraining metrics for a batch or evaluation set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub mlm_loss: f64,
    pub mlm_acc: f64,
    pub nsp_loss: f64,
    pub nsp_acc: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.mlm_loss + self.nsp_loss
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LossSums {
    mlm_ce: f64,
    mlm_weight: f64,
    mlm_correct: f64,
    nsp_ce: f64,
    nsp_correct: f64,
    n: usize,
}

impl LossSums {
    fn add(&mut self, o: &LossSums) {
        self.mlm_ce += o.mlm_ce;
        self.mlm_weight += o.mlm_weight;
        self.mlm_correct += o.mlm_correct;
        self.nsp_ce += o.nsp_ce;
        self.nsp_correct += o.nsp_correct;
        self.n += o.n;
    }

    fn finish(&self) -> Result<Losses, ModelError> {
        if self.n == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if self.mlm_weight <= 0.0 {
            return Err(ModelError::NoMaskedSlots);
        }
        Ok(Losses {
            mlm_loss: self.mlm_ce / self.mlm_weight,
            mlm_acc: self.mlm_correct / self.mlm_weight,
            nsp_loss: self.nsp_ce / self.n as f64,
            nsp_acc: self.nsp_correct / self.n as f64,
        })
    }
}

/// Logits for a batch: `mlm_logits` is `[batch, MAX_PREDICTIONS, vocab]`
/// (every slot, weighted or not) and `nsp_logits` is `[batch, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub batch: usize,
    pub slots: usize,
    pub vocab: usize,
    pub mlm_logits: Vec<f64>,
    pub nsp_logits: Vec<f64>,
}

impl ForwardOutput {
    pub fn mlm_shape(&self) -> [usize; 3] {
        [self.batch, self.slots, self.vocab]
    }

    pub fn nsp_shape(&self) -> [usize; 2] {
        [self.batch, 2]
    }

    pub fn mlm_row(&self, example: usize, slot: usize) -> &[f64] {
        let start = (example * self.slots + slot) * self.vocab;
        &self.mlm_logits[start..start + self.vocab]
    }

    pub fn nsp_row(&self, example: usize) -> &[f64] {
        &self.nsp_logits[example * 2..example * 2 + 2]
    }
}

fn slot_positions(ex: &PretrainExample) -> Vec<usize> {
    ex.masked_positions.iter().map(|&p| p as usize).collect()
}

fn weighted_slots(ex: &PretrainExample) -> (Vec<usize>, Vec<(u32, f64)>) {
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for k in 0..MAX_PREDICTIONS {
        let w = f64::from(ex.masked_weights[k]);
        if w != 0.0 {
            positions.push(ex.masked_positions[k] as usize);
            targets.push((ex.masked_label_ids[k], w));
        }
    }
    (positions, targets)
}

pub(crate) fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Logits for every prediction slot and the NSP head.
pub fn forward(
    params: &Parameters,
    batch: &[PretrainExample],
) -> Result<ForwardOutput, ModelError> {
    forward_f64(&params.to_f64(), batch, true)
}

pub(crate) fn forward_f64(
    w: &Params<f64>,
    batch: &[PretrainExample],
    trim: bool,
) -> Result<ForwardOutput, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let parts: Vec<(Vec<f64>, Vec<f64>)> = chunks(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut mlm = Vec::new();
            let mut nsp = Vec::new();
            for i in range {
                let ex = &batch[i];
                let input = EncoderInput::from_example(ex, trim);
                let cache =
                    pretrain_forward(w, &input, &slot_positions(ex)).map_err(|e| e.at(i))?;
                mlm.extend_from_slice(&cache.mlm_logits);
                nsp.extend_from_slice(&cache.nsp_logits);
            }
            Ok((mlm, nsp))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut out = ForwardOutput {
        batch: batch.len(),
        slots: MAX_PREDICTIONS,
        vocab: w.config.vocab_size,
        mlm_logits: Vec::with_capacity(batch.len() * MAX_PREDICTIONS * w.config.vocab_size),
        nsp_logits: Vec::with_capacity(batch.len() * 2),
    };
    for (m, n) in parts {
        out.mlm_logits.extend(m);
        out.nsp_logits.extend(n);
    }
    Ok(out)
}

/// Weighted-mean MLM cross-entropy, mean NSP cross-entropy and argmax
/// accuracies (ties resolve to the lowest index).
pub fn compute_losses(
    out: &ForwardOutput,
    batch: &[PretrainExample],
) -> Result<Losses, ModelError> {
    if out.batch != batch.len() {
        return Err(ModelError::InExample {
            example: out.batch.min(batch.len()),
            source: Box::new(ModelError::EmptyBatch),
        });
    }
    let mut sums = LossSums::default();
    for (i, ex) in batch.iter().enumerate() {
        for k in 0..out.slots {
            let w = f64::from(ex.masked_weights[k]);
            if w == 0.0 {
                continue;
            }
            let (ce, correct, _) = softmax_xent(out.mlm_row(i, k), ex.masked_label_ids[k] as usize);
            sums.mlm_ce += w * ce;
            sums.mlm_weight += w;
            sums.mlm_correct += if correct { w } else { 0.0 };
        }
        let (ce, correct, _) = softmax_xent(out.nsp_row(i), ex.nsp_label as usize);
        sums.nsp_ce += ce;
        sums.nsp_correct += f64::from(u8::from(correct));
        sums.n += 1;
    }
    sums.finish()
}

/// Loss metrics plus, optionally, the exact gradient of
/// `mlm_loss + nsp_loss` over the batch.
pub(crate) fn batch_loss_grad(
    w: &Params<f64>,
    batch: &[PretrainExample],
    want_grad: bool,
) -> Result<(Losses, Option<Gradients>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total_weight: f64 = batch
        .iter()
        .flat_map(|ex| ex.masked_weights.iter().map(|&x| f64::from(x)))
        .sum();
    if total_weight <= 0.0 {
        return Err(ModelError::NoMaskedSlots);
    }
    let n = batch.len() as f64;
    let vocab = w.config.vocab_size;

    let parts: Vec<(LossSums, Option<Gradients>)> = chunks(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut sums = LossSums::default();
            let mut grads = want_grad.then(|| Gradients::zeros_like(&w.config));
            for i in range {
                let ex = &batch[i];
                let (positions, targets) = weighted_slots(ex);
                let input = EncoderInput::from_example(ex, true);
                let cache = pretrain_forward(w, &input, &positions).map_err(|e| e.at(i))?;
                let mut d_mlm = vec![0.0; positions.len() * vocab];
                for (s, &(label, weight)) in targets.iter().enumerate() {
                    let (ce, correct, g) = softmax_xent(
                        &cache.mlm_logits[s * vocab..(s + 1) * vocab],
                        label as usize,
                    );
                    sums.mlm_ce += weight * ce;
                    sums.mlm_weight += weight;
                    sums.mlm_correct += if correct { weight } else { 0.0 };
                    for (d, gv) in d_mlm[s * vocab..(s + 1) * vocab].iter_mut().zip(g) {
                        *d = gv * weight / total_weight;
                    }
                }
                let (ce, correct, g) = softmax_xent(&cache.nsp_logits, ex.nsp_label as usize);
                sums.nsp_ce += ce;
                sums.nsp_correct += f64::from(u8::from(correct));
                sums.n += 1;
                if let Some(grads) = grads.as_mut() {
                    let d_nsp = [g[0] / n, g[1] / n];
                    pretrain_backward(w, &cache, &d_mlm, &d_nsp, grads);
                }
            }
            Ok((sums, grads))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut sums = LossSums::default();
    let mut total: Option<Gradients> = None;
    for (s, g) in parts {
        sums.add(&s);
        match (&mut total, g) {
            (None, g) => total = g,
            (Some(t), Some(g)) => t.add_assign(&g),
            _ => {}
        }
    }
    let losses = sums.finish()?;
    if let Some(g) = &total {
        for (name, t) in g.named_tensors() {
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite {
                    stage: format!("gradient of {name}"),
                });
            }
        }
    }
    Ok((losses, total))
}

/// Exact gradient of `mlm_loss + nsp_loss` wrt every parameter.
pub fn gradients(
    params: &Parameters,
    batch: &[PretrainExample],
) -> Result<(Losses, Gradients), ModelError> {
    let (losses, grads) = batch_loss_grad(&params.to_f64(), batch, true)?;
    Ok((losses, grads.expect("gradient requested")))
}

/// Loss metrics only, computing logits just for weighted slots.
pub fn evaluate(params: &Parameters, batch: &[PretrainExample]) -> Result<Losses, ModelError> {
    Ok(batch_loss_grad(&params.to_f64(), batch, false)?.0)
}

impl Params<f64> {
    pub fn add_assign(&mut self, other: &Params<f64>) {
        for ((_, a), (_, b)) in self
            .named_tensors_mut()
            .into_iter()
            .zip(other.named_tensors())
        {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
}

#[cfg(test)]
mod tests;
