//! MLM + NSP pretraining examples: sentence pairing, whole-word masking,
//! fixed-size binary shards and multi-pass generation.

mod generate;
mod masking;
mod pairing;
mod shard;

pub use generate::{generate_shards, GenerateConfig, GenerateError, ShardManifest, ShardSet};
pub use masking::{mask_sequence, mask_tokens, MaskChoice, MaskedSequence, MASK_RATE};
pub use pairing::{
    encode_docs, pair_sentences, pair_sentences_seeded, EncodedDoc, PairError, PairingOptions,
    SegmentPair,
};
pub use shard::{
    read_shard, write_shard, ShardError, ShardReader, ShardWriter, HEADER_BYTES, MAGIC,
    RECORD_BYTES, VERSION,
};

use crate::tokenizer::{TokenSequence, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::{MAX_PREDICTIONS, SEQ_LEN};

/// Token budget for the two segments (sequence minus `[CLS]` and two `[SEP]`).
pub const PAIR_BUDGET: usize = SEQ_LEN - 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum NspLabel {
    IsNext = 0,
    Random = 1,
}

impl NspLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(NspLabel::IsNext),
            1 => Some(NspLabel::Random),
            _ => None,
        }
    }
}

/// One fixed-geometry training instance.
///
/// Layout: `[CLS] A [SEP] B [SEP]` then `[PAD]`. Prediction slots beyond
/// `num_predictions` are zero with weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub input_ids: [u32; SEQ_LEN],
    pub input_mask: [bool; SEQ_LEN],
    pub segment_ids: [u8; SEQ_LEN],
    pub num_predictions: u8,
    pub masked_positions: [u16; MAX_PREDICTIONS],
    pub masked_label_ids: [u32; MAX_PREDICTIONS],
    pub masked_weights: [f32; MAX_PREDICTIONS],
    pub nsp_label: NspLabel,
}

impl PretrainExample {
    /// Number of real (non-PAD) tokens; they always form a prefix.
    pub fn real_len(&self) -> usize {
        self.input_mask.iter().take_while(|&&m| m).count()
    }

    /// `(position, original id)` for each real prediction slot.
    pub fn predictions(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        (0..self.num_predictions as usize)
            .map(|k| (self.masked_positions[k] as usize, self.masked_label_ids[k]))
    }

    /// Builds the padded layout and applies whole-word masking in one go.
    pub fn assemble(pair: &SegmentPair, masked: &MaskedSequence) -> Self {
        let mut ex = PretrainExample {
            input_ids: [PAD_ID; SEQ_LEN],
            input_mask: [false; SEQ_LEN],
            segment_ids: [0; SEQ_LEN],
            num_predictions: masked.positions.len() as u8,
            masked_positions: [0; MAX_PREDICTIONS],
            masked_label_ids: [0; MAX_PREDICTIONS],
            masked_weights: [0.0; MAX_PREDICTIONS],
            nsp_label: pair.label,
        };
        let b_start = pair.a.len() + 2;
        for (i, &id) in masked.ids.iter().enumerate() {
            ex.input_ids[i] = id;
            ex.input_mask[i] = true;
            ex.segment_ids[i] = u8::from(i >= b_start);
        }
        for (k, (&p, &l)) in masked.positions.iter().zip(&masked.labels).enumerate() {
            ex.masked_positions[k] = p as u16;
            ex.masked_label_ids[k] = l;
            ex.masked_weights[k] = 1.0;
        }
        ex
    }

    /// Lays out `[CLS] a [SEP] b [SEP]` and replaces each id at `masked`
    /// (indices into the full layout) with `[MASK]`. Handy for synthetic
    /// corpora that bypass the tokenizer.
    ///
    /// # Panics
    /// If the layout exceeds the sequence length, more than
    /// `MAX_PREDICTIONS` positions are given, or a position is not inside
    /// `a` or `b`.
    pub fn from_ids(a: &[u32], b: &[u32], masked: &[usize], nsp_label: NspLabel) -> Self {
        let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
        ids.push(CLS_ID);
        ids.extend_from_slice(a);
        ids.push(SEP_ID);
        ids.extend_from_slice(b);
        ids.push(SEP_ID);
        assert!(ids.len() <= SEQ_LEN, "layout of {} tokens", ids.len());
        assert!(
            masked.len() <= MAX_PREDICTIONS,
            "{} predictions",
            masked.len()
        );
        let mut positions = masked.to_vec();
        positions.sort_unstable();
        let mut labels = Vec::with_capacity(positions.len());
        for &p in &positions {
            assert!(
                p > 0 && p < ids.len() - 1 && p != a.len() + 1,
                "position {p} is not a segment token"
            );
            labels.push(ids[p]);
            ids[p] = MASK_ID;
        }
        let pair = SegmentPair {
            a: TokenSequence {
                ids: a.to_vec(),
                word_start: vec![true; a.len()],
            },
            b: TokenSequence {
                ids: b.to_vec(),
                word_start: vec![true; b.len()],
            },
            label: nsp_label,
        };
        let masked = MaskedSequence {
            ids,
            positions,
            labels,
            choices: Vec::new(),
            word_count: a.len() + b.len(),
        };
        Self::assemble(&pair, &masked)
    }
}

/// `[CLS] A [SEP] B [SEP]` with word-start marks (specials count as their own
/// words but are never maskable).
pub fn pair_layout(pair: &SegmentPair) -> TokenSequence {
    let mut seq = TokenSequence::default();
    let mut push = |id: u32, start: bool| {
        seq.ids.push(id);
        seq.word_start.push(start);
    };
    push(CLS_ID, true);
    for (i, &id) in pair.a.ids.iter().enumerate() {
        push(id, pair.a.word_start[i]);
    }
    push(SEP_ID, true);
    for (i, &id) in pair.b.ids.iter().enumerate() {
        push(id, pair.b.word_start[i]);
    }
    push(SEP_ID, true);
    seq
}
