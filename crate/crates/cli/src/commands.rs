use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dapt_core::corpus::{
    clean_tweet, prep_corpus, read_docs_jsonl, EmojiTable, RawTweet, SentenceDoc,
};
use dapt_core::eval::{
    discover_checkpoints, emit_report, finetune, read_report_json, run_matrix, EvalReport,
    LabeledDataset, MatrixConfig, REPORT_JSON,
};
use dapt_core::examples::{generate_shards, ShardSet};
use dapt_core::model::{init_params, load_checkpoint, Parameters};
use dapt_core::tokenizer::{build_vocab, Vocabulary};
use dapt_core::train::{pretrain, PretrainData, Start};
use dapt_core::{URL_TOKEN, USER_TOKEN};
use serde_json::{json, Value};

use crate::config::{require, require_input, FinetuneSection, ModelSection, Paths, TrainSection};
use crate::manifest::{beside, inside};
use crate::{
    Cli, CliError, Command, DescribeArgs, FinetuneFlags, ModelArgs, ModelCommand, RunConfig,
    RunManifest, VocabCommand,
};

pub const CELLS_FILE: &str = "cells.jsonl";

pub fn dispatch(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let cfg = crate::resolve_config(cli)?;
    log::info!(
        "event=start command={} config_hash={} seed={} jobs={}",
        command_name(&cli.command),
        cfg.hash(),
        cfg.seed(),
        rayon::current_num_threads()
    );
    match &cli.command {
        Command::Prep(_) => prep(&cfg, argv),
        Command::Vocab(VocabCommand::Build(_)) => vocab_build(&cfg, argv),
        Command::Vocab(VocabCommand::Inspect(a)) => vocab_inspect(&cfg, a.text.as_deref()),
        Command::Examples(_) => examples(&cfg, argv),
        Command::Pretrain(a) => pretrain_cmd(&cfg, a.resume.as_deref(), argv),
        Command::Finetune(a) => {
            finetune_cmd(&cfg, &a.checkpoint, &a.dataset, a.out.as_deref(), argv)
        }
        Command::EvalMatrix(_) => eval_matrix(&cfg, argv),
        Command::Report(a) => report(&cfg, a.report.as_deref(), a.out.as_deref(), argv),
        Command::Model(ModelCommand::Describe(a)) => describe(&cfg, a),
    }
}

pub fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Prep(_) => "prep",
        Command::Vocab(VocabCommand::Build(_)) => "vocab-build",
        Command::Vocab(VocabCommand::Inspect(_)) => "vocab-inspect",
        Command::Examples(_) => "examples",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::EvalMatrix(_) => "eval-matrix",
        Command::Report(_) => "report",
        Command::Model(ModelCommand::Describe(_)) => "model-describe",
    }
}

fn model_section(m: &ModelArgs) -> ModelSection {
    ModelSection {
        layers: m.layers,
        hidden: m.hidden,
        heads: m.heads,
        ff_dim: m.ff_dim,
        max_seq: m.max_seq,
    }
}

fn finetune_section(f: &FinetuneFlags) -> FinetuneSection {
    FinetuneSection {
        learning_rate: f.lr,
        batch_size: f.batch_size,
        epochs: f.epochs,
    }
}

/// The flags of `command`, in config shape.
pub fn flag_config(command: &Command) -> RunConfig {
    let mut c = RunConfig::default();
    match command {
        Command::Prep(a) => {
            c.paths = Paths {
                corpus: a.input.clone(),
                docs: a.out.clone(),
                rejects: a.rejects.clone(),
                emoji_table: a.emoji_table.clone(),
                ..Paths::default()
            };
            c.dedup_threshold = a.dedup_threshold;
        }
        Command::Vocab(VocabCommand::Build(a)) => {
            c.paths.docs = a.docs.clone();
            c.paths.vocab = a.out.clone();
            c.vocab_size = a.size;
        }
        Command::Vocab(VocabCommand::Inspect(a)) => c.paths.vocab = a.vocab.clone(),
        Command::Examples(a) => {
            c.paths.docs = a.docs.clone();
            c.paths.vocab = a.vocab.clone();
            c.paths.shards = a.out.clone();
            c.dupe_factor = a.dupe_factor;
            c.num_shards = a.num_shards;
            c.valid_fraction = a.valid_fraction;
            c.seed = a.seed;
        }
        Command::Pretrain(a) => {
            c.paths.shards = a.shards.clone();
            c.paths.checkpoints = a.out.clone();
            c.model = model_section(&a.model);
            c.train = TrainSection {
                learning_rate: a.lr,
                batch_size: a.batch_size,
                total_steps: a.steps,
                checkpoint_interval: a.checkpoint_interval,
                eval_interval: a.eval_interval,
            };
            c.seed = a.seed;
        }
        Command::Finetune(a) => {
            c.paths.vocab = a.vocab.clone();
            c.paths.datasets = a.datasets.clone();
            c.finetune = finetune_section(&a.finetune);
            c.seed = a.seed;
        }
        Command::EvalMatrix(a) => {
            c.paths.checkpoints = a.checkpoints.clone();
            c.paths.datasets = a.datasets.clone();
            c.paths.vocab = a.vocab.clone();
            c.paths.reports = a.out.clone();
            c.repeats = a.repeats;
            c.seed = a.seed;
            c.finetune = finetune_section(&a.finetune);
        }
        Command::Report(_) => {}
        Command::Model(ModelCommand::Describe(a)) => {
            c.model = model_section(&a.model);
            c.paths.vocab = a.vocab.clone();
        }
    }
    c
}

fn print_json(v: &Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("value serializes")
    );
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn load_docs(path: &Path) -> Result<Vec<SentenceDoc>, CliError> {
    read_docs_jsonl(BufReader::new(File::open(path)?))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_vocab(cfg: &RunConfig, flag: &str) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::load(require_input(&cfg.paths.vocab, flag)?)?)
}

fn load_emoji(cfg: &RunConfig) -> Result<EmojiTable, CliError> {
    match &cfg.paths.emoji_table {
        Some(p) => EmojiTable::load(p).map_err(|e| CliError::Data(e.to_string())),
        None => Ok(EmojiTable::builtin()),
    }
}

fn prep(cfg: &RunConfig, argv: &[String]) -> Result<(), CliError> {
    let out = require(&cfg.paths.docs, "--out")?;
    let input = require_input(&cfg.paths.corpus, "--in")?;
    let rejects = cfg.paths.rejects.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".rejects.jsonl");
        out.with_file_name(name)
    });
    let emoji = load_emoji(cfg)?;
    create_parent(out)?;
    create_parent(&rejects)?;
    let stats = prep_corpus(input, out, &rejects, &emoji, cfg.dedup_threshold.unwrap())?;
    let outputs = json!({"docs": out, "rejects": rejects, "stats": stats});
    RunManifest::new("prep", argv, cfg, outputs.clone()).write(&beside(out))?;
    print_json(&outputs);
    Ok(())
}

fn vocab_build(cfg: &RunConfig, argv: &[String]) -> Result<(), CliError> {
    let out = require(&cfg.paths.vocab, "--out")?;
    let docs = load_docs(require_input(&cfg.paths.docs, "--docs")?)?;
    let target = cfg.vocab_size.unwrap();
    let build = build_vocab(&docs, target, &[USER_TOKEN, URL_TOKEN])?;
    if !build.target_reached {
        log::warn!(
            "event=vocab_short target={target} size={}",
            build.vocab.len()
        );
    }
    create_parent(out)?;
    build.vocab.save(out)?;
    let outputs = json!({
        "vocab": out,
        "size": build.vocab.len(),
        "target_reached": build.target_reached,
        "hash": build.vocab.hash(),
        "docs": docs.len(),
    });
    RunManifest::new("vocab-build", argv, cfg, outputs.clone()).write(&beside(out))?;
    print_json(&outputs);
    Ok(())
}

fn vocab_inspect(cfg: &RunConfig, text: Option<&str>) -> Result<(), CliError> {
    let vocab = load_vocab(cfg, "--vocab")?;
    let mut out = serde_json::to_value(vocab.summary()).expect("summary serializes");
    if let Some(text) = text {
        // tokenize exactly what pretraining would see
        let cleaned = clean_tweet(&RawTweet::new("inspect", text), &load_emoji(cfg)?)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let seq = vocab.encode(&cleaned.text);
        let pieces: Vec<&str> = seq
            .ids
            .iter()
            .map(|&i| vocab.token(i).unwrap_or("?"))
            .collect();
        out["normalized"] = json!(cleaned.text);
        out["ids"] = json!(seq.ids);
        out["pieces"] = json!(pieces);
    }
    print_json(&out);
    Ok(())
}

fn examples(cfg: &RunConfig, argv: &[String]) -> Result<(), CliError> {
    let out = require(&cfg.paths.shards, "--out")?;
    let docs = load_docs(require_input(&cfg.paths.docs, "--docs")?)?;
    let vocab = load_vocab(cfg, "--vocab")?;
    let set = generate_shards(&docs, &vocab, &cfg.generate_config(), out)?;
    let outputs = serde_json::to_value(&set.manifest).expect("manifest serializes");
    RunManifest::new("examples", argv, cfg, outputs.clone()).write(&inside(out, "examples"))?;
    print_json(&outputs);
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig, resume: Option<&Path>, argv: &[String]) -> Result<(), CliError> {
    let out = require(&cfg.paths.checkpoints, "--out")?;
    let shards = require_input(&cfg.paths.shards, "--shards")?;
    let set = ShardSet::load(shards)?;
    let data = PretrainData::from_shards(&set)?;
    let start = match resume {
        Some(p) if !p.exists() => {
            return Err(CliError::Data(format!(
                "input {} does not exist",
                p.display()
            )))
        }
        Some(p) => Start::Resume(p.to_path_buf()),
        None => Start::Fresh(cfg.model_config(set.manifest.vocab_size)),
    };
    let outcome = pretrain(&cfg.train_config(), &data, start, out)?;
    let outputs = json!({
        "resume": resume,
        "final_step": outcome.final_step,
        "final_checkpoint": outcome.final_checkpoint,
        "checkpoints": outcome.checkpoints,
        "last_metrics": outcome.metrics.last(),
        "vocab_hash": set.manifest.vocab_hash,
    });
    RunManifest::new("pretrain", argv, cfg, outputs.clone()).write(&inside(out, "pretrain"))?;
    print_json(&outputs);
    Ok(())
}

fn finetune_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &str,
    out: Option<&Path>,
    argv: &[String],
) -> Result<(), CliError> {
    require_input(&Some(checkpoint.to_path_buf()), "--checkpoint")?;
    let datasets = require_input(&cfg.paths.datasets, "--datasets")?;
    let vocab = load_vocab(cfg, "--vocab")?;
    let ds = LabeledDataset::load(datasets, dataset)?;
    let ck = load_checkpoint(checkpoint)?;
    let res = finetune(&ck, &vocab, &ds, &cfg.finetune_config(), cfg.seed())?;
    let outputs = json!({
        "checkpoint": checkpoint,
        "checkpoint_step": ck.step,
        "dataset": ds.name,
        "seed": cfg.seed(),
        "macro_f1": res.macro_f1,
        "epochs": res.epochs,
        "steps": res.steps,
        "final_train_loss": res.final_train_loss,
    });
    if let Some(out) = out {
        create_parent(out)?;
        let mut bytes = serde_json::to_vec_pretty(&outputs).expect("value serializes");
        bytes.push(b'\n');
        dapt_core::util::write_atomic(out, &bytes)?;
        RunManifest::new("finetune", argv, cfg, outputs.clone()).write(&beside(out))?;
    }
    print_json(&outputs);
    Ok(())
}

fn eval_matrix(cfg: &RunConfig, argv: &[String]) -> Result<(), CliError> {
    let out = require(&cfg.paths.reports, "--out")?;
    let checkpoints =
        discover_checkpoints(require_input(&cfg.paths.checkpoints, "--checkpoints")?)?;
    let datasets = LabeledDataset::load_dir(require_input(&cfg.paths.datasets, "--datasets")?)?;
    let vocab = load_vocab(cfg, "--vocab")?;
    let mc = MatrixConfig {
        repeats: cfg.repeats.unwrap(),
        base_seed: cfg.seed(),
        finetune: cfg.finetune_config(),
    };
    fs::create_dir_all(out)?;
    let report = run_matrix(
        &checkpoints,
        &datasets,
        &vocab,
        &mc,
        Some(&out.join(CELLS_FILE)),
    )?;
    let files = emit_report(&report, out)?;
    let outputs = json!({
        "report_json": files.json,
        "report_csv": files.csv,
        "plot_csv": files.plot,
        "checkpoint_steps": report.checkpoint_steps,
        "datasets": report.datasets,
        "dataset_fingerprints": datasets.iter().map(|d| d.fingerprint()).collect::<Vec<_>>(),
        "vocab_hash": vocab.hash(),
    });
    RunManifest::new("eval-matrix", argv, cfg, outputs).write(&inside(out, "eval-matrix"))?;
    print_table(&report);
    Ok(())
}

fn report(
    cfg: &RunConfig,
    path: Option<&Path>,
    out: Option<&Path>,
    argv: &[String],
) -> Result<(), CliError> {
    let path: PathBuf = match path {
        Some(p) => p.to_path_buf(),
        None => require(&cfg.paths.reports, "--report")?.join(REPORT_JSON),
    };
    require_input(&Some(path.clone()), "--report")?;
    let report = read_report_json(&path)?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let files = emit_report(&report, &out)?;
    let outputs = json!({"source": path, "report_csv": files.csv, "plot_csv": files.plot});
    RunManifest::new("report", argv, cfg, outputs).write(&inside(&out, "report"))?;
    print_table(&report);
    Ok(())
}

fn print_table(report: &EvalReport) {
    println!("dataset\tstep\trepeats\tmean_f1\tsem\tdelta_mp_pct");
    for c in &report.cells {
        let dmp = c
            .delta_mp_pct
            .map_or("n/a".to_string(), |d| format!("{d:.2}"));
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            c.dataset,
            c.checkpoint_step,
            c.f1s.len(),
            c.mean_f1,
            c.sem,
            dmp
        );
    }
}

fn describe(cfg: &RunConfig, a: &DescribeArgs) -> Result<(), CliError> {
    let (params, step): (Parameters, Option<u64>) = match &a.checkpoint {
        Some(p) => {
            require_input(&Some(p.clone()), "--checkpoint")?;
            let ck = load_checkpoint(p)?;
            (ck.params, Some(ck.step))
        }
        None => {
            let vocab_size = match (a.vocab_size, &cfg.paths.vocab) {
                (Some(n), _) => n,
                (None, Some(_)) => load_vocab(cfg, "--vocab")?.len(),
                (None, None) => {
                    return Err(CliError::Usage(
                        "model describe needs --checkpoint, --vocab-size or --vocab".into(),
                    ))
                }
            };
            let params = init_params(&cfg.model_config(vocab_size))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            (params, None)
        }
    };
    let tensors: Vec<Value> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| json!({"name": name, "shape": t.shape, "count": t.len()}))
        .collect();
    print_json(&json!({
        "config": params.config,
        "step": step,
        "parameter_count": params.parameter_count(),
        "tensors": tensors,
    }));
    Ok(())
}
