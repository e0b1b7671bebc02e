//! Sequence classification head on the `[CLS]` pooler, used for finetuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::encoder::{
    encoder_backward, encoder_forward, pooler_backward, pooler_forward, softmax_xent, EncoderInput,
};
use super::linalg::{linear, linear_backward};
use super::params::{truncated_normal, Gradients, Parameters, Params, Tensor, INIT_STD};
use super::{chunks, ModelError};
use crate::tokenizer::{CLS_ID, SEP_ID};

/// A single-segment input `[CLS] tokens [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierInput {
    pub ids: Vec<u32>,
}

impl ClassifierInput {
    /// Wraps word-piece ids, truncating so the sequence fits `max_seq`.
    pub fn new(tokens: &[u32], max_seq: usize) -> Self {
        let keep = tokens.len().min(max_seq.saturating_sub(2));
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(&tokens[..keep]);
        ids.push(SEP_ID);
        ClassifierInput { ids }
    }

    fn view<'a>(&'a self, segments: &'a [u8], mask: &'a [bool]) -> EncoderInput<'a> {
        let n = self.ids.len();
        EncoderInput {
            ids: &self.ids,
            segments: &segments[..n],
            mask: &mask[..n],
        }
    }
}

/// `softmax(pooled @ W + b)` over the dataset's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl ClassifierHead {
    pub fn init(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Tensor::zeros(&[hidden, classes]);
        for w in &mut weight.data {
            *w = truncated_normal(&mut rng, INIT_STD) as f32;
        }
        ClassifierHead {
            weight,
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

pub(crate) struct Head64 {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
}

impl Head64 {
    pub fn new(head: &ClassifierHead) -> Self {
        Head64 {
            w: head.weight.data.iter().map(|&x| f64::from(x)).collect(),
            b: head.bias.data.iter().map(|&x| f64::from(x)).collect(),
            classes: head.classes(),
        }
    }
}

fn scratch(max_seq: usize) -> (Vec<u8>, Vec<bool>) {
    (vec![0; max_seq], vec![true; max_seq])
}

fn logits(w: &Params<f64>, head: &Head64, input: &ClassifierInput) -> Result<Vec<f64>, ModelError> {
    let (seg, mask) = scratch(input.ids.len());
    let enc = encoder_forward(w, &input.view(&seg, &mask))?;
    let pooled = pooler_forward(w, &enc.output()[..w.config.hidden]);
    let mut out = vec![0.0; head.classes];
    linear(&pooled, 1, &head.w, &head.b, &mut out);
    Ok(out)
}

/// Argmax class per input (ties to the lowest index).
pub fn predict(
    params: &Parameters,
    head: &ClassifierHead,
    inputs: &[ClassifierInput],
) -> Result<Vec<usize>, ModelError> {
    let w = params.to_f64();
    let h = Head64::new(head);
    let parts: Vec<Vec<usize>> = chunks(inputs.len())
        .into_par_iter()
        .map(|range| {
            range
                .map(|i| {
                    let l = logits(&w, &h, &inputs[i]).map_err(|e| e.at(i))?;
                    Ok(argmax(&l))
                })
                .collect::<Result<Vec<_>, ModelError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients of the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy over `batch` and its exact gradient wrt the encoder,
/// the pooler and the head.
pub fn classifier_gradients(
    params: &Parameters,
    head: &ClassifierHead,
    batch: &[(ClassifierInput, usize)],
) -> Result<(f64, Gradients, HeadGradients), ModelError> {
    classifier_loss_grad(&params.to_f64(), &Head64::new(head), batch)
}

pub(crate) fn classifier_loss_grad(
    w: &Params<f64>,
    hd: &Head64,
    batch: &[(ClassifierInput, usize)],
) -> Result<(f64, Gradients, HeadGradients), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let hidden = w.config.hidden;
    let n = batch.len() as f64;
    let parts: Vec<(f64, Gradients, HeadGradients)> = chunks(batch.len())
        .into_par_iter()
        .map(|range| {
            let mut loss = 0.0;
            let mut g = Gradients::zeros_like(&w.config);
            let mut hg = HeadGradients {
                weight: vec![0.0; hd.w.len()],
                bias: vec![0.0; hd.classes],
            };
            for i in range {
                let (input, label) = &batch[i];
                if *label >= hd.classes {
                    return Err(ModelError::LabelOutOfRange {
                        example: i,
                        label: *label,
                        classes: hd.classes,
                    });
                }
                let (seg, mask) = scratch(input.ids.len());
                let enc = encoder_forward(w, &input.view(&seg, &mask)).map_err(|e| e.at(i))?;
                let cls = &enc.output()[..hidden];
                let pooled = pooler_forward(w, cls);
                let mut out = vec![0.0; hd.classes];
                linear(&pooled, 1, &hd.w, &hd.b, &mut out);
                let (ce, _, mut d) = softmax_xent(&out, *label);
                loss += ce;
                d.iter_mut().for_each(|x| *x /= n);
                let mut d_pooled = vec![0.0; hidden];
                linear_backward(
                    &pooled,
                    1,
                    &hd.w,
                    &d,
                    &mut hg.weight,
                    &mut hg.bias,
                    Some((d_pooled.as_mut_slice(), false)),
                );
                let d_cls = pooler_backward(w, cls, &pooled, &d_pooled, &mut g);
                let mut d_out = vec![0.0; enc.output().len()];
                d_out[..hidden].copy_from_slice(&d_cls);
                encoder_backward(w, &enc, d_out, &mut g);
            }
            Ok((loss, g, hg))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut g, mut hg) = iter.next().expect("non-empty batch");
    for (l, g2, h2) in iter {
        loss += l;
        g.add_assign(&g2);
        hg.weight
            .iter_mut()
            .zip(&h2.weight)
            .for_each(|(a, b)| *a += b);
        hg.bias.iter_mut().zip(&h2.bias).for_each(|(a, b)| *a += b);
    }
    Ok((loss / n, g, hg))
}
