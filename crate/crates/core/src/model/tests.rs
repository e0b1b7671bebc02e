use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{embed, encoder_forward_from, EncoderInput};
use super::*;
use crate::examples::{NspLabel, PretrainExample};

fn toy_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        ff_dim: 64,
        vocab_size: vocab,
        max_seq: crate::SEQ_LEN,
        seed: 7,
    }
}

fn random_batch(n: usize, vocab: u32, seed: u64) -> Vec<PretrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: Vec<u32> = (0..rng.gen_range(2..8))
                .map(|_| rng.gen_range(5..vocab))
                .collect();
            let b: Vec<u32> = (0..rng.gen_range(2..8))
                .map(|_| rng.gen_range(5..vocab))
                .collect();
            let mut masked = vec![1, a.len() + 2];
            if rng.gen_bool(0.5) {
                masked.push(a.len() + 1 + b.len());
            }
            let label = if rng.gen_bool(0.5) {
                NspLabel::IsNext
            } else {
                NspLabel::Random
            };
            PretrainExample::from_ids(&a, &b, &masked, label)
        })
        .collect()
}

#[test]
fn output_shapes() {
    let params = init_params(&toy_config(100)).unwrap();
    let out = forward(&params, &random_batch(2, 100, 1)).unwrap();
    assert_eq!(out.mlm_shape(), [2, 14, 100]);
    assert_eq!(out.nsp_shape(), [2, 2]);
    assert_eq!(out.mlm_logits.len(), 2 * 14 * 100);
    assert!(out.mlm_logits.iter().all(|v| v.is_finite()));
}

#[test]
fn permutation_permutes_outputs() {
    let params = init_params(&toy_config(50)).unwrap();
    let batch = random_batch(11, 50, 2);
    let mut rev = batch.clone();
    rev.reverse();
    let a = forward(&params, &batch).unwrap();
    let b = forward(&params, &rev).unwrap();
    for i in 0..batch.len() {
        let j = batch.len() - 1 - i;
        assert_eq!(a.nsp_row(i), b.nsp_row(j));
        for s in 0..14 {
            assert_eq!(a.mlm_row(i, s), b.mlm_row(j, s));
        }
    }
}

#[test]
fn padding_is_invisible() {
    let params = init_params(&toy_config(60)).unwrap();
    let w = params.to_f64();
    let ex = &random_batch(1, 60, 3)[0];
    let len = ex.real_len();
    let input = EncoderInput::from_example(ex, false);
    let base = embed(&w, &input);
    let mut perturbed = base.clone();
    let h = w.config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in &mut perturbed[len * h..] {
        *v = rng.gen_range(-5.0..5.0);
    }
    let a = encoder_forward_from(&w, &input, &base).unwrap();
    let b = encoder_forward_from(&w, &input, &perturbed).unwrap();
    let diff = a.output()[..len * h]
        .iter()
        .zip(&b.output()[..len * h])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max diff {diff}");

    // the trimmed pass agrees with the full-length one
    let full = forward_f64(&w, std::slice::from_ref(ex), false).unwrap();
    let trimmed = forward_f64(&w, std::slice::from_ref(ex), true).unwrap();
    for (x, y) in full.mlm_logits.iter().zip(&trimmed.mlm_logits) {
        assert!((x - y).abs() <= 1e-9);
    }
}

fn manual_output(batch: usize, vocab: usize, mlm: f64, nsp: [f64; 2]) -> ForwardOutput {
    ForwardOutput {
        batch,
        slots: 14,
        vocab,
        mlm_logits: vec![mlm; batch * 14 * vocab],
        nsp_logits: nsp.iter().copied().cycle().take(batch * 2).collect(),
    }
}

#[test]
fn uniform_logits_give_log_vocab_and_log_two() {
    let mut batch = random_batch(3, 100, 4);
    batch[1].nsp_label = NspLabel::Random;
    let l = compute_losses(&manual_output(3, 100, 0.25, [1.0, 1.0]), &batch).unwrap();
    assert!((l.mlm_loss - 100f64.ln()).abs() < 1e-12);
    assert!((l.nsp_loss - 2f64.ln()).abs() < 1e-12);
    // ties resolve to index 0 (IsNext)
    let expect = batch
        .iter()
        .filter(|e| e.nsp_label == NspLabel::IsNext)
        .count() as f64
        / 3.0;
    assert_eq!(l.nsp_acc, expect);
}

#[test]
fn confident_correct_logits_give_zero_loss() {
    let batch = random_batch(2, 30, 5);
    let mut out = manual_output(2, 30, 0.0, [0.0, 0.0]);
    for (i, ex) in batch.iter().enumerate() {
        for k in 0..14 {
            let start = (i * 14 + k) * 30;
            out.mlm_logits[start + ex.masked_label_ids[k] as usize] = 100.0;
        }
        out.nsp_logits[i * 2 + ex.nsp_label as usize] = 100.0;
    }
    let l = compute_losses(&out, &batch).unwrap();
    assert!(l.mlm_loss < 1e-30 && l.nsp_loss < 1e-30);
    assert_eq!((l.mlm_acc, l.nsp_acc), (1.0, 1.0));
}

#[test]
fn zero_weights_rejected() {
    let mut batch = random_batch(2, 30, 6);
    for ex in &mut batch {
        ex.masked_weights = [0.0; 14];
    }
    let params = init_params(&toy_config(30)).unwrap();
    assert!(matches!(
        evaluate(&params, &batch),
        Err(ModelError::NoMaskedSlots)
    ));
    let out = forward(&params, &batch).unwrap();
    assert!(matches!(
        compute_losses(&out, &batch),
        Err(ModelError::NoMaskedSlots)
    ));
}

#[test]
fn out_of_range_id_names_example_and_position() {
    let params = init_params(&toy_config(30)).unwrap();
    let mut batch = random_batch(12, 30, 7);
    batch[9].input_ids[2] = 30;
    match forward(&params, &batch) {
        Err(ModelError::TokenOutOfRange {
            example, position, ..
        }) => assert_eq!((example, position), (9, 2)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gradients_are_deterministic_and_skip_padding_rows() {
    let params = init_params(&toy_config(40)).unwrap();
    let batch = random_batch(10, 40, 8);
    let (l1, g1) = gradients(&params, &batch).unwrap();
    let (l2, g2) = gradients(&params, &batch).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    let longest = batch.iter().map(|e| e.real_len()).max().unwrap();
    let h = 32;
    assert!(g1.position_emb.data[longest * h..]
        .iter()
        .all(|&v| v == 0.0));
    assert!(g1.position_emb.data[..h].iter().any(|&v| v != 0.0));
    let eval = evaluate(&params, &batch).unwrap();
    assert_eq!(eval, l1);
    let out = forward(&params, &batch).unwrap();
    let via_logits = compute_losses(&out, &batch).unwrap();
    assert!((via_logits.mlm_loss - l1.mlm_loss).abs() < 1e-12);
    assert!((via_logits.nsp_loss - l1.nsp_loss).abs() < 1e-12);
}

#[test]
fn untrained_loss_near_log_vocab() {
    let params = init_params(&toy_config(64)).unwrap();
    let l = evaluate(&params, &random_batch(32, 64, 9)).unwrap();
    let ln = 64f64.ln();
    assert!((l.mlm_loss - ln).abs() < 0.1 * ln, "{}", l.mlm_loss);
}

#[test]
fn finite_differences_agree() {
    let params = init_params(&toy_config(40)).unwrap();
    let batch = random_batch(3, 40, 10);
    let report = grad_check_encoder(&params, &batch, 1e-3, 1e-3, 20, 1).unwrap();
    assert_eq!(report.tensors.len(), params.named_tensors().len());
    for t in &report.tensors {
        assert!(t.passed, "{} worst {:?}", t.name, t.worst);
    }
    assert!(report.passed());

    let strict = grad_check_encoder(&params, &batch[..1], 1e-3, 0.0, 3, 1).unwrap();
    assert!(!strict.passed());
}

#[test]
fn linear_probe_is_nearly_exact() {
    let mut probe = LinearProbe {
        weight: 0.3,
        xs: vec![1.0, -2.0, 0.5, 3.0],
        ys: vec![2.0, 1.0, -1.0, 0.25],
    };
    let report = grad_check(&mut probe, 1e-3, 1e-6, 20, 0).unwrap();
    assert!(report.passed(), "{:?}", report);
    assert!(report.tensors[0].worst.rel_error <= 1e-6);
}

#[test]
fn adam_reduces_loss() {
    let mut params = init_params(&toy_config(30)).unwrap();
    let batch = random_batch(8, 30, 11);
    let adam = Adam::new(1e-2);
    let mut state = AdamState::new(&params.config);
    let start = evaluate(&params, &batch).unwrap().total();
    for _ in 0..20 {
        let (_, g) = gradients(&params, &batch).unwrap();
        adam.step(&mut params, &g, &mut state);
    }
    let end = evaluate(&params, &batch).unwrap().total();
    assert!(end < start * 0.7, "{start} -> {end}");
    assert_eq!(state.step, 20);
}

mod checkpoints {
    use super::*;
    use std::fs;

    fn trained() -> Checkpoint {
        let mut params = init_params(&toy_config(30)).unwrap();
        let adam = Adam::new(1e-3);
        let mut state = AdamState::new(&params.config);
        let (_, g) = gradients(&params, &random_batch(4, 30, 12)).unwrap();
        adam.step(&mut params, &g, &mut state);
        Checkpoint {
            params,
            optimizer: adam,
            state,
            step: 1,
            metadata: serde_json::json!({"note": "test"}),
        }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ck = trained();
        save_checkpoint(&ck, &dir.path().join("a")).unwrap();
        let loaded = load_checkpoint(&dir.path().join("a")).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&loaded, &dir.path().join("b")).unwrap();
        for f in ["manifest.json", "tensors.bin"] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let batch = random_batch(3, 30, 13);
        assert_eq!(
            forward(&ck.params, &batch).unwrap(),
            forward(&loaded.params, &batch).unwrap()
        );
    }

    #[test]
    fn wrong_vocab_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained(), dir.path()).unwrap();
        let err = load_checkpoint_with(dir.path(), Some(&toy_config(31))).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch {
                name,
                expected,
                found,
            } => {
                assert_eq!(name, "embeddings.token");
                assert_eq!((expected, found), (vec![31, 32], vec![30, 32]));
            }
            other => panic!("{other:?}"),
        }
        assert!(load_checkpoint_with(dir.path(), Some(&toy_config(30))).is_ok());
    }

    #[test]
    fn truncation_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained(), dir.path()).unwrap();
        let blob_path = dir.path().join("tensors.bin");
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::Truncated { .. })
        ));
        fs::write(&blob_path, &blob).unwrap();

        let man_path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&man_path).unwrap();
        fs::write(
            &man_path,
            text.replace("\"format_version\": 1", "\"format_version\": 9"),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::Version { found: 9 })
        ));
        fs::write(&man_path, &text).unwrap();

        let mut flipped = blob.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        fs::write(&blob_path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(CheckpointError::Checksum)
        ));
    }
}

mod classifier_grad {
    use super::*;
    use crate::model::classifier::{classifier_loss_grad, Head64};
    use crate::model::gradcheck::relative_error;

    #[test]
    fn matches_finite_differences() {
        let cfg = toy_config(40);
        let params = init_params(&cfg).unwrap();
        let head = ClassifierHead::init(cfg.hidden, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<(ClassifierInput, usize)> = (0..5)
            .map(|i| {
                let toks: Vec<u32> = (0..rng.gen_range(2..9))
                    .map(|_| rng.gen_range(5..40))
                    .collect();
                (ClassifierInput::new(&toks, cfg.max_seq), i % 3)
            })
            .collect();
        let mut w = params.to_f64();
        let mut hd = Head64::new(&head);
        let (_, g, hg) = classifier_loss_grad(&w, &hd, &batch).unwrap();
        let h = 1e-4;
        let loss = |w: &Params<f64>, hd: &Head64| classifier_loss_grad(w, hd, &batch).unwrap().0;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            if name.starts_with("mlm") || name.starts_with("nsp") {
                continue;
            }
            let len = w.named_tensors()[t].1.len();
            for i in (0..len).step_by((len / 7).max(1)) {
                let orig = w.named_tensors()[t].1.data[i];
                w.named_tensors_mut()[t].1.data[i] = orig + h;
                let plus = loss(&w, &hd);
                w.named_tensors_mut()[t].1.data[i] = orig - h;
                let minus = loss(&w, &hd);
                w.named_tensors_mut()[t].1.data[i] = orig;
                let a = g.named_tensors()[t].1.data[i];
                let e = relative_error(a, (plus - minus) / (2.0 * h));
                assert!(
                    e <= 1e-4,
                    "{name}[{i}]: {a} vs {}",
                    (plus - minus) / (2.0 * h)
                );
                worst = worst.max(e);
            }
        }
        for i in 0..hd.w.len() {
            let orig = hd.w[i];
            hd.w[i] = orig + h;
            let plus = loss(&w, &hd);
            hd.w[i] = orig - h;
            let minus = loss(&w, &hd);
            hd.w[i] = orig;
            assert!(relative_error(hg.weight[i], (plus - minus) / (2.0 * h)) <= 1e-4);
        }
        for i in 0..3 {
            let orig = hd.b[i];
            hd.b[i] = orig + h;
            let plus = loss(&w, &hd);
            hd.b[i] = orig - h;
            let minus = loss(&w, &hd);
            hd.b[i] = orig;
            assert!(relative_error(hg.bias[i], (plus - minus) / (2.0 * h)) <= 1e-4);
        }
    }
}
