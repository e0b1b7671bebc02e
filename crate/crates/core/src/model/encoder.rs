//! Forward and backward passes of the encoder stack and its pretraining
//! heads, one example at a time.
//!
//! Rows past the last real token are dropped before any compute (trimming);
//! the attention mask still applies to every position, so an untrimmed pass
//! produces the same logits.

use super::linalg::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, log_softmax,
    masked_softmax, Mat, MatMut, NormCache,
};
use super::params::{LayerParams, Params};
use super::ModelError;
use crate::examples::PretrainExample;

/// Token ids, segments and padding mask of one sequence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub segments: &'a [u8],
    pub mask: &'a [bool],
}

impl<'a> EncoderInput<'a> {
    pub fn from_example(ex: &'a PretrainExample, trim: bool) -> Self {
        let len = if trim {
            ex.real_len()
        } else {
            ex.input_ids.len()
        };
        EncoderInput {
            ids: &ex.input_ids[..len],
            segments: &ex.segment_ids[..len],
            mask: &ex.input_mask[..len],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

pub(crate) struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln1: NormCache,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ln2: NormCache,
}

pub(crate) struct EncoderCache {
    len: usize,
    ids: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: NormCache,
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    /// Final hidden states, `len x hidden`.
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&self.emb_ln.out, |l| &l.ln2.out)
    }
}

fn check_finite(values: &[f64], stage: impl FnOnce() -> String) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage: stage() })
    }
}

pub(crate) fn validate_input(w: &Params<f64>, input: &EncoderInput) -> Result<(), ModelError> {
    let cfg = &w.config;
    if input.len() == 0 {
        return Err(ModelError::EmptySequence);
    }
    if input.len() > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: input.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(p) = input
        .ids
        .iter()
        .position(|&id| id as usize >= cfg.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange {
            example: 0,
            position: p,
            id: input.ids[p],
            vocab_size: cfg.vocab_size,
        });
    }
    if let Some(p) = input.segments.iter().position(|&s| s > 1) {
        return Err(ModelError::BadSegment { position: p });
    }
    Ok(())
}

/// Sum of token, position and segment embeddings (`len x hidden`).
pub(crate) fn embed(w: &Params<f64>, input: &EncoderInput) -> Vec<f64> {
    let h = w.config.hidden;
    let mut x = vec![0.0; input.len() * h];
    for t in 0..input.len() {
        let tok = &w.token_emb.data[input.ids[t] as usize * h..][..h];
        let pos = &w.position_emb.data[t * h..][..h];
        let seg = &w.segment_emb.data[input.segments[t] as usize * h..][..h];
        for c in 0..h {
            x[t * h + c] = tok[c] + pos[c] + seg[c];
        }
    }
    x
}

pub(crate) fn encoder_forward(
    w: &Params<f64>,
    input: &EncoderInput,
) -> Result<EncoderCache, ModelError> {
    validate_input(w, input)?;
    let x = embed(w, input);
    encoder_forward_from(w, input, &x)
}

/// Runs the stack from precomputed input embeddings.
pub(crate) fn encoder_forward_from(
    w: &Params<f64>,
    input: &EncoderInput,
    embeddings: &[f64],
) -> Result<EncoderCache, ModelError> {
    let h = w.config.hidden;
    let emb_ln = layer_norm(embeddings, h, &w.emb_ln_gamma.data, &w.emb_ln_beta.data);
    check_finite(&emb_ln.out, || "embeddings".into())?;
    let mut layers: Vec<LayerCache> = Vec::with_capacity(w.layers.len());
    for (i, lw) in w.layers.iter().enumerate() {
        let x = layers.last().map_or(&emb_ln.out, |l| &l.ln2.out).clone();
        let cache = layer_forward(lw, &w.config, input.mask, x);
        check_finite(&cache.ln2.out, || format!("layer {i}"))?;
        layers.push(cache);
    }
    Ok(EncoderCache {
        len: input.len(),
        ids: input.ids.to_vec(),
        segments: input.segments.to_vec(),
        emb_ln,
        layers,
    })
}

fn layer_forward(
    lw: &LayerParams<f64>,
    cfg: &super::ModelConfig,
    mask: &[bool],
    x: Vec<f64>,
) -> LayerCache {
    let (len, h, nh, d, f) = (
        mask.len(),
        cfg.hidden,
        cfg.heads,
        cfg.head_dim(),
        cfg.ff_dim,
    );
    let scale = 1.0 / (d as f64).sqrt();
    let mut q = vec![0.0; len * h];
    let mut k = vec![0.0; len * h];
    let mut v = vec![0.0; len * h];
    linear(&x, len, &lw.q_w.data, &lw.q_b.data, &mut q);
    linear(&x, len, &lw.k_w.data, &lw.k_b.data, &mut k);
    linear(&x, len, &lw.v_w.data, &lw.v_b.data, &mut v);

    let mut probs = vec![0.0; nh * len * len];
    let mut ctx = vec![0.0; len * h];
    for head in 0..nh {
        let p = &mut probs[head * len * len..(head + 1) * len * len];
        gemm(
            scale,
            Mat::new(&q, len, h).cols(head * d, d),
            Mat::new(&k, len, h).cols(head * d, d).t(),
            0.0,
            MatMut::new(p, len, len),
        );
        for row in p.chunks_mut(len) {
            masked_softmax(row, mask);
        }
        gemm(
            1.0,
            Mat::new(p, len, len),
            Mat::new(&v, len, h).cols(head * d, d),
            0.0,
            MatMut::new(&mut ctx, len, h).cols(head * d, d),
        );
    }

    let mut attn = vec![0.0; len * h];
    linear(&ctx, len, &lw.o_w.data, &lw.o_b.data, &mut attn);
    for (a, xi) in attn.iter_mut().zip(&x) {
        *a += xi;
    }
    let ln1 = layer_norm(&attn, h, &lw.ln1_gamma.data, &lw.ln1_beta.data);

    let mut ff_pre = vec![0.0; len * f];
    linear(&ln1.out, len, &lw.ff1_w.data, &lw.ff1_b.data, &mut ff_pre);
    let ff_act: Vec<f64> = ff_pre.iter().map(|&z| gelu(z)).collect();
    let mut ff_out = vec![0.0; len * h];
    linear(&ff_act, len, &lw.ff2_w.data, &lw.ff2_b.data, &mut ff_out);
    for (o, r) in ff_out.iter_mut().zip(&ln1.out) {
        *o += r;
    }
    let ln2 = layer_norm(&ff_out, h, &lw.ln2_gamma.data, &lw.ln2_beta.data);

    LayerCache {
        input: x,
        q,
        k,
        v,
        probs,
        ctx,
        ln1,
        ff_pre,
        ff_act,
        ln2,
    }
}

/// Backpropagates `d_out` (gradient wrt the final hidden states) through
/// the stack into `grads`.
pub(crate) fn encoder_backward(
    w: &Params<f64>,
    cache: &EncoderCache,
    d_out: Vec<f64>,
    grads: &mut Params<f64>,
) {
    let h = w.config.hidden;
    let mut d = d_out;
    for (i, lc) in cache.layers.iter().enumerate().rev() {
        d = layer_backward(
            &w.layers[i],
            &w.config,
            lc,
            cache.len,
            &d,
            &mut grads.layers[i],
        );
    }
    let dx = layer_norm_backward(
        &cache.emb_ln,
        h,
        &w.emb_ln_gamma.data,
        &d,
        &mut grads.emb_ln_gamma.data,
        &mut grads.emb_ln_beta.data,
    );
    for t in 0..cache.len {
        let row = &dx[t * h..(t + 1) * h];
        let tok = cache.ids[t] as usize * h;
        let seg = cache.segments[t] as usize * h;
        for c in 0..h {
            grads.token_emb.data[tok + c] += row[c];
            grads.position_emb.data[t * h + c] += row[c];
            grads.segment_emb.data[seg + c] += row[c];
        }
    }
}

fn layer_backward(
    lw: &LayerParams<f64>,
    cfg: &super::ModelConfig,
    lc: &LayerCache,
    len: usize,
    d_out: &[f64],
    g: &mut LayerParams<f64>,
) -> Vec<f64> {
    let (h, nh, d, f) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.ff_dim);
    let scale = 1.0 / (d as f64).sqrt();

    let d_res2 = layer_norm_backward(
        &lc.ln2,
        h,
        &lw.ln2_gamma.data,
        d_out,
        &mut g.ln2_gamma.data,
        &mut g.ln2_beta.data,
    );
    let mut d_act = vec![0.0; len * f];
    linear_backward(
        &lc.ff_act,
        len,
        &lw.ff2_w.data,
        &d_res2,
        &mut g.ff2_w.data,
        &mut g.ff2_b.data,
        Some((d_act.as_mut_slice(), false)),
    );
    for (da, &z) in d_act.iter_mut().zip(&lc.ff_pre) {
        *da *= gelu_grad(z);
    }
    let mut d_ln1 = d_res2;
    linear_backward(
        &lc.ln1.out,
        len,
        &lw.ff1_w.data,
        &d_act,
        &mut g.ff1_w.data,
        &mut g.ff1_b.data,
        Some((d_ln1.as_mut_slice(), true)),
    );
    let d_res1 = layer_norm_backward(
        &lc.ln1,
        h,
        &lw.ln1_gamma.data,
        &d_ln1,
        &mut g.ln1_gamma.data,
        &mut g.ln1_beta.data,
    );

    let mut d_ctx = vec![0.0; len * h];
    linear_backward(
        &lc.ctx,
        len,
        &lw.o_w.data,
        &d_res1,
        &mut g.o_w.data,
        &mut g.o_b.data,
        Some((d_ctx.as_mut_slice(), false)),
    );

    let mut dq = vec![0.0; len * h];
    let mut dk = vec![0.0; len * h];
    let mut dv = vec![0.0; len * h];
    let mut dp = vec![0.0; len * len];
    for head in 0..nh {
        let p = &lc.probs[head * len * len..(head + 1) * len * len];
        gemm(
            1.0,
            Mat::new(&d_ctx, len, h).cols(head * d, d),
            Mat::new(&lc.v, len, h).cols(head * d, d).t(),
            0.0,
            MatMut::new(&mut dp, len, len),
        );
        gemm(
            1.0,
            Mat::new(p, len, len).t(),
            Mat::new(&d_ctx, len, h).cols(head * d, d),
            0.0,
            MatMut::new(&mut dv, len, h).cols(head * d, d),
        );
        // softmax backward, row by row; masked entries have p = 0
        for r in 0..len {
            let prow = &p[r * len..(r + 1) * len];
            let drow = &mut dp[r * len..(r + 1) * len];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot);
            }
        }
        gemm(
            scale,
            Mat::new(&dp, len, len),
            Mat::new(&lc.k, len, h).cols(head * d, d),
            0.0,
            MatMut::new(&mut dq, len, h).cols(head * d, d),
        );
        gemm(
            scale,
            Mat::new(&dp, len, len).t(),
            Mat::new(&lc.q, len, h).cols(head * d, d),
            0.0,
            MatMut::new(&mut dk, len, h).cols(head * d, d),
        );
    }

    let mut dx = d_res1;
    for (dy, wt, dw, db) in [
        (&dq, &lw.q_w, &mut g.q_w, &mut g.q_b),
        (&dk, &lw.k_w, &mut g.k_w, &mut g.k_b),
        (&dv, &lw.v_w, &mut g.v_w, &mut g.v_b),
    ] {
        linear_backward(
            &lc.input,
            len,
            &wt.data,
            dy,
            &mut dw.data,
            &mut db.data,
            Some((dx.as_mut_slice(), true)),
        );
    }
    dx
}

/// `tanh(h_cls @ W + b)`.
pub(crate) fn pooler_forward(w: &Params<f64>, cls: &[f64]) -> Vec<f64> {
    let mut pooled = vec![0.0; w.config.hidden];
    linear(cls, 1, &w.pooler_w.data, &w.pooler_b.data, &mut pooled);
    pooled.iter_mut().for_each(|p| *p = p.tanh());
    pooled
}

/// Returns the gradient wrt the `[CLS]` hidden state.
pub(crate) fn pooler_backward(
    w: &Params<f64>,
    cls: &[f64],
    pooled: &[f64],
    d_pooled: &[f64],
    grads: &mut Params<f64>,
) -> Vec<f64> {
    let dz: Vec<f64> = d_pooled
        .iter()
        .zip(pooled)
        .map(|(g, p)| g * (1.0 - p * p))
        .collect();
    let mut d_cls = vec![0.0; w.config.hidden];
    linear_backward(
        cls,
        1,
        &w.pooler_w.data,
        &dz,
        &mut grads.pooler_w.data,
        &mut grads.pooler_b.data,
        Some((d_cls.as_mut_slice(), false)),
    );
    d_cls
}

/// Activations of the MLM and NSP heads for one example.
pub(crate) struct PretrainCache {
    pub enc: EncoderCache,
    positions: Vec<usize>,
    gathered: Vec<f64>,
    dense_pre: Vec<f64>,
    dense_ln: NormCache,
    pub mlm_logits: Vec<f64>,
    pooled: Vec<f64>,
    pub nsp_logits: [f64; 2],
}

pub(crate) fn pretrain_forward(
    w: &Params<f64>,
    input: &EncoderInput,
    positions: &[usize],
) -> Result<PretrainCache, ModelError> {
    let enc = encoder_forward(w, input)?;
    pretrain_heads(w, enc, positions)
}

pub(crate) fn pretrain_heads(
    w: &Params<f64>,
    enc: EncoderCache,
    positions: &[usize],
) -> Result<PretrainCache, ModelError> {
    let (h, vocab) = (w.config.hidden, w.config.vocab_size);
    let n = positions.len();
    let out = enc.output();
    let mut gathered = vec![0.0; n * h];
    for (s, &p) in positions.iter().enumerate() {
        if p >= enc.len {
            return Err(ModelError::MaskedPositionOutOfRange {
                position: p,
                len: enc.len,
            });
        }
        gathered[s * h..(s + 1) * h].copy_from_slice(&out[p * h..(p + 1) * h]);
    }
    let mut dense_pre = vec![0.0; n * h];
    linear(
        &gathered,
        n,
        &w.mlm_dense_w.data,
        &w.mlm_dense_b.data,
        &mut dense_pre,
    );
    let act: Vec<f64> = dense_pre.iter().map(|&z| gelu(z)).collect();
    let dense_ln = layer_norm(&act, h, &w.mlm_ln_gamma.data, &w.mlm_ln_beta.data);
    let mut mlm_logits = vec![0.0; n * vocab];
    for r in 0..n {
        mlm_logits[r * vocab..(r + 1) * vocab].copy_from_slice(&w.mlm_out_bias.data);
    }
    gemm(
        1.0,
        Mat::new(&dense_ln.out, n, h),
        Mat::new(&w.token_emb.data, vocab, h).t(),
        1.0,
        MatMut::new(&mut mlm_logits, n, vocab),
    );
    check_finite(&mlm_logits, || "mlm head".into())?;

    let pooled = pooler_forward(w, &out[..h]);
    let mut nsp = [0.0; 2];
    linear(&pooled, 1, &w.nsp_w.data, &w.nsp_b.data, &mut nsp);
    check_finite(&nsp, || "nsp head".into())?;

    Ok(PretrainCache {
        enc,
        positions: positions.to_vec(),
        gathered,
        dense_pre,
        dense_ln,
        mlm_logits,
        pooled,
        nsp_logits: nsp,
    })
}

pub(crate) fn pretrain_backward(
    w: &Params<f64>,
    cache: &PretrainCache,
    d_mlm_logits: &[f64],
    d_nsp: &[f64; 2],
    grads: &mut Params<f64>,
) {
    let (h, vocab) = (w.config.hidden, w.config.vocab_size);
    let n = cache.positions.len();
    let len = cache.enc.len;
    let mut d_out = vec![0.0; len * h];

    if n > 0 {
        for r in 0..n {
            for (b, g) in grads
                .mlm_out_bias
                .data
                .iter_mut()
                .zip(&d_mlm_logits[r * vocab..(r + 1) * vocab])
            {
                *b += g;
            }
        }
        // tied projection: logits = n @ E^T
        gemm(
            1.0,
            Mat::new(d_mlm_logits, n, vocab).t(),
            Mat::new(&cache.dense_ln.out, n, h),
            1.0,
            MatMut::new(&mut grads.token_emb.data, vocab, h),
        );
        let mut d_norm = vec![0.0; n * h];
        gemm(
            1.0,
            Mat::new(d_mlm_logits, n, vocab),
            Mat::new(&w.token_emb.data, vocab, h),
            0.0,
            MatMut::new(&mut d_norm, n, h),
        );
        let mut d_act = layer_norm_backward(
            &cache.dense_ln,
            h,
            &w.mlm_ln_gamma.data,
            &d_norm,
            &mut grads.mlm_ln_gamma.data,
            &mut grads.mlm_ln_beta.data,
        );
        for (da, &z) in d_act.iter_mut().zip(&cache.dense_pre) {
            *da *= gelu_grad(z);
        }
        let mut d_gathered = vec![0.0; n * h];
        linear_backward(
            &cache.gathered,
            n,
            &w.mlm_dense_w.data,
            &d_act,
            &mut grads.mlm_dense_w.data,
            &mut grads.mlm_dense_b.data,
            Some((d_gathered.as_mut_slice(), false)),
        );
        for (s, &p) in cache.positions.iter().enumerate() {
            for c in 0..h {
                d_out[p * h + c] += d_gathered[s * h + c];
            }
        }
    }

    let mut d_pooled = vec![0.0; h];
    linear_backward(
        &cache.pooled,
        1,
        &w.nsp_w.data,
        d_nsp,
        &mut grads.nsp_w.data,
        &mut grads.nsp_b.data,
        Some((d_pooled.as_mut_slice(), false)),
    );
    let cls = &cache.enc.output()[..h];
    let d_cls = pooler_backward(w, cls, &cache.pooled, &d_pooled, grads);
    for c in 0..h {
        d_out[c] += d_cls[c];
    }
    encoder_backward(w, &cache.enc, d_out, grads);
}

/// Cross-entropy and its gradient `softmax - onehot` for one row.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, bool, Vec<f64>) {
    let (lp, argmax) = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    (-lp[label], argmax == label, grad)
}
