use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{macro_f1, EvalError, LabeledDataset};
use crate::model::{
    classifier_gradients, predict, Adam, AdamState, Checkpoint, ClassifierHead, ClassifierInput,
};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Overrides the dataset's epoch policy.
    pub epochs: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EvalError::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == Some(0) {
            return Err(EvalError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub macro_f1: f64,
    pub epochs: usize,
    pub steps: u64,
    pub final_train_loss: f64,
    pub dev_predictions: Vec<usize>,
}

/// Trains a fresh classification head on the pooled `[CLS]` state, updating
/// every encoder weight too, then scores the dev split. The head init and
/// batch order depend only on `seed`.
pub fn finetune(
    ck: &Checkpoint,
    vocab: &Vocabulary,
    ds: &LabeledDataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult, EvalError> {
    cfg.validate()?;
    let mc = &ck.params.config;
    if mc.vocab_size != vocab.len() {
        return Err(EvalError::VocabMismatch {
            model: mc.vocab_size,
            vocab: vocab.len(),
        });
    }
    let encode = |rows: &[(String, usize)]| -> Vec<(ClassifierInput, usize)> {
        rows.iter()
            .map(|(t, y)| (ClassifierInput::new(&vocab.encode(t).ids, mc.max_seq), *y))
            .collect()
    };
    let train = encode(&ds.train);
    let dev = encode(&ds.dev);

    let mut params = ck.params.clone();
    let mut head = ClassifierHead::init(mc.hidden, ds.classes.len(), seed);
    let adam = Adam::new(cfg.learning_rate);
    let mut state = AdamState::new(mc);
    let (mut hm_w, mut hv_w) = (vec![0f32; head.weight.len()], vec![0f32; head.weight.len()]);
    let (mut hm_b, mut hv_b) = (vec![0f32; head.bias.len()], vec![0f32; head.bias.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let epochs = cfg.epochs.unwrap_or(ds.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(ClassifierInput, usize)> =
                idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads, hg) = classifier_gradients(&params, &head, &batch)?;
            adam.step(&mut params, &grads, &mut state);
            let t = state.step;
            adam.update_slice(t, &mut head.weight.data, &hg.weight, &mut hm_w, &mut hv_w);
            adam.update_slice(t, &mut head.bias.data, &hg.bias, &mut hm_b, &mut hv_b);
            last_loss = loss;
        }
    }
    let inputs: Vec<ClassifierInput> = dev.iter().map(|(x, _)| x.clone()).collect();
    let gold: Vec<usize> = dev.iter().map(|(_, y)| *y).collect();
    let pred = predict(&params, &head, &inputs)?;
    Ok(FinetuneResult {
        macro_f1: macro_f1(&gold, &pred),
        epochs,
        steps: state.step,
        final_train_loss: last_loss,
        dev_predictions: pred,
    })
}
