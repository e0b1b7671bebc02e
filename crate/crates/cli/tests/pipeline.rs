//! Drives the `dapt` binary through every stage on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapt"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dapt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    dapt(dir, args).status.code().unwrap()
}

const WORDS: &[&str] = &[
    "vaccine", "covid", "mask", "lockdown", "cases", "hospital", "doctor", "nurse", "test",
    "school", "work", "home", "stay", "safe", "virus", "spread", "health", "people", "today",
    "news", "report", "data", "positive", "negative",
];

/// Deterministic pseudo-random tweets with mentions, URLs, emoji and
/// retweets mixed in.
fn write_tweets(path: &Path, n: usize) {
    let mut s: u64 = 0x9e3779b97f4a7c15;
    let mut next = |m: usize| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % m as u64) as usize
    };
    let mut out = String::new();
    for i in 0..n {
        let mut text = String::new();
        if i % 9 == 0 {
            text.push_str("RT @someone: ");
        }
        for _ in 0..2 + next(3) {
            let words: Vec<&str> = (0..4 + next(6)).map(|_| WORDS[next(WORDS.len())]).collect();
            text.push_str(&words.join(" "));
            text.push_str(". ");
        }
        if i % 4 == 0 {
            text.push_str("@friend https://t.co/abc 😷");
        }
        out.push_str(&serde_json::json!({"id": i.to_string(), "text": text}).to_string());
        out.push('\n');
    }
    out.push_str("{broken\n");
    fs::write(path, out).unwrap();
}

fn write_datasets(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let (pos, neg) = (&WORDS[..6], &WORDS[12..18]);
    for (name, offset) in [("alpha", 0), ("beta", 1)] {
        let mut rows = Vec::new();
        for i in 0..60 {
            let label = (i + offset) % 2;
            let kw = if label == 0 { pos } else { neg };
            rows.push(format!(
                "{} {} {},{}",
                kw[i % 6],
                kw[(i / 6) % 6],
                WORDS[18 + i % 6],
                ["neg", "pos"][label]
            ));
        }
        rows.sort();
        rows.dedup();
        let (train, dev) = rows.split_at(rows.len() * 2 / 3);
        for (split, part) in [("train", train), ("dev", dev)] {
            fs::write(
                dir.join(format!("{name}.{split}.csv")),
                format!("text,label\n{}\n", part.join("\n")),
            )
            .unwrap();
        }
    }
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const MODEL: &[&str] = &[
    "--layers",
    "1",
    "--hidden",
    "16",
    "--heads",
    "2",
    "--ff-dim",
    "32",
    "--lr",
    "1e-3",
    "--batch-size",
    "8",
    "--checkpoint-interval",
    "10",
    "--eval-interval",
    "5",
    "--steps",
    "20",
];

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tweets(&d.join("tweets.jsonl"), 600);

    let prep: Value = serde_json::from_str(&ok(
        d,
        &["prep", "--in", "tweets.jsonl", "--out", "docs.jsonl"],
    ))
    .unwrap();
    assert_eq!(prep["stats"]["rejected"], 1);
    assert!(prep["stats"]["retweets"].as_u64().unwrap() > 0);
    let docs = fs::read_to_string(d.join("docs.jsonl")).unwrap();
    assert!(
        !docs.contains("@friend") && !docs.contains("https://") && docs.contains("twitteruser")
    );
    let m = manifest(&d.join("docs.jsonl.run.json"));
    assert_eq!(m["command"], "prep");
    assert_eq!(m["seed"], 12345);
    assert_eq!(m["config"]["dedup_threshold"], 0.8);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    ok(
        d,
        &[
            "vocab",
            "build",
            "--docs",
            "docs.jsonl",
            "--out",
            "vocab.txt",
            "--size",
            "120",
        ],
    );
    let inspect: Value = serde_json::from_str(&ok(
        d,
        &[
            "vocab",
            "inspect",
            "--vocab",
            "vocab.txt",
            "--text",
            "@x Vaccine!",
        ],
    ))
    .unwrap();
    assert_eq!(inspect["pieces"][0], "twitteruser");

    let examples_args = [
        "examples",
        "--docs",
        "docs.jsonl",
        "--vocab",
        "vocab.txt",
        "--out",
        "shards",
        "--dupe-factor",
        "2",
        "--shards",
        "2",
        "--valid-fraction",
        "0.1",
        "--seed",
        "3",
    ];
    ok(d, &examples_args);
    let shard = fs::read(d.join("shards/train-00000.shard")).unwrap();
    // the recorded manifest reproduces the stage byte for byte
    fs::remove_file(d.join("shards/train-00000.shard")).unwrap();
    fs::rename(
        d.join("shards/examples.run.json"),
        d.join("examples.run.json"),
    )
    .unwrap();
    ok(d, &["examples", "--config", "examples.run.json"]);
    assert_eq!(fs::read(d.join("shards/train-00000.shard")).unwrap(), shard);

    let mut full = vec!["pretrain", "--shards", "shards", "--out", "ck"];
    full.extend_from_slice(MODEL);
    let outcome: Value = serde_json::from_str(&ok(d, &full)).unwrap();
    assert_eq!(outcome["final_step"], 20);
    assert!(d.join("ck/pretrain.run.json").is_file());

    // interrupted at step 10, resumed into a second directory
    let mut resumed = vec![
        "pretrain",
        "--shards",
        "shards",
        "--out",
        "ck2",
        "--resume",
        "ck/step000010",
    ];
    resumed.extend_from_slice(MODEL);
    ok(d, &resumed);
    let metrics = |p: &str| -> Vec<String> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect()
    };
    let (a, b) = (metrics("ck/metrics.jsonl"), metrics("ck2/metrics.jsonl"));
    assert_eq!(a[a.len() - b.len()..], b[..]);
    assert_eq!(
        fs::read(d.join("ck/step000020/tensors.bin")).unwrap(),
        fs::read(d.join("ck2/step000020/tensors.bin")).unwrap()
    );

    // worker count never changes the numbers
    let mut threaded = vec![
        "--jobs", "3", "pretrain", "--shards", "shards", "--out", "ck3",
    ];
    threaded.extend_from_slice(MODEL);
    ok(d, &threaded);
    assert_eq!(metrics("ck3/metrics.jsonl"), a);
    assert_eq!(
        fs::read(d.join("ck/step000020/tensors.bin")).unwrap(),
        fs::read(d.join("ck3/step000020/tensors.bin")).unwrap()
    );

    let described: Value = serde_json::from_str(&ok(
        d,
        &["model", "describe", "--checkpoint", "ck/step000020"],
    ))
    .unwrap();
    assert_eq!(described["step"], 20);
    assert_eq!(described["config"]["hidden"], 16);

    write_datasets(&d.join("data"));
    let ft: Value = serde_json::from_str(&ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "ck/step000020",
            "--vocab",
            "vocab.txt",
            "--datasets",
            "data",
            "--dataset",
            "alpha",
            "--epochs",
            "1",
            "--lr",
            "1e-3",
            "--out",
            "ft/alpha.json",
        ],
    ))
    .unwrap();
    assert!((0.0..=1.0).contains(&ft["macro_f1"].as_f64().unwrap()));
    assert!(d.join("ft/alpha.json.run.json").is_file());

    let matrix = [
        "eval-matrix",
        "--checkpoints",
        "ck",
        "--datasets",
        "data",
        "--vocab",
        "vocab.txt",
        "--repeats",
        "2",
        "--epochs",
        "1",
        "--lr",
        "1e-3",
        "--out",
        "rep",
    ];
    let table = ok(d, &matrix);
    // header + 3 steps × 2 datasets
    assert_eq!(table.lines().count(), 7, "{table}");
    assert_eq!(
        fs::read_to_string(d.join("rep/cells.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
    let report = fs::read(d.join("rep/report.json")).unwrap();
    // a rerun takes every cell from the state file
    assert_eq!(ok(d, &matrix), table);
    assert_eq!(
        fs::read_to_string(d.join("rep/cells.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
    assert_eq!(fs::read(d.join("rep/report.json")).unwrap(), report);

    assert_eq!(
        ok(
            d,
            &["report", "--report", "rep/report.json", "--out", "rep2"]
        ),
        table
    );
    for f in ["report.csv", "plot.csv", "report.run.json"] {
        assert!(d.join("rep2").join(f).is_file(), "{f}");
    }
    assert_eq!(
        fs::read(d.join("rep/report.csv")).unwrap(),
        fs::read(d.join("rep2/report.csv")).unwrap()
    );
}

#[test]
fn config_file_drives_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tweets(&d.join("tweets.jsonl"), 200);
    let cfg = serde_json::json!({
        "paths": {"corpus": "tweets.jsonl", "docs": "out/docs.jsonl", "vocab": "out/vocab.txt"},
        "vocab_size": 80,
        "dedup_threshold": 0.9
    });
    fs::write(d.join("run.json"), cfg.to_string()).unwrap();
    ok(d, &["--config", "run.json", "prep"]);
    ok(
        d,
        &["vocab", "build", "--config", "run.json", "--size", "90"],
    );
    let m = manifest(&d.join("out/vocab.txt.run.json"));
    assert_eq!(m["config"]["vocab_size"], 90);
    assert_eq!(m["config"]["dedup_threshold"], 0.9);
    assert_eq!(
        manifest(&d.join("out/docs.jsonl.run.json"))["config"]["dedup_threshold"],
        0.9
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["--version"]), 0);
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["prep", "--no-such-flag"]), 1);
    let err = dapt(d, &["frobnicate"]);
    assert!(String::from_utf8_lossy(&err.stderr).contains("Usage"));
    // missing required path
    assert_eq!(code(d, &["prep", "--in", "x.jsonl"]), 1);
    // input that does not exist
    assert_eq!(
        code(d, &["prep", "--in", "nope.jsonl", "--out", "o.jsonl"]),
        2
    );
    write_tweets(&d.join("t.jsonl"), 50);
    assert_eq!(
        code(
            d,
            &[
                "prep",
                "--in",
                "t.jsonl",
                "--out",
                "o.jsonl",
                "--dedup-threshold",
                "1.5"
            ]
        ),
        1
    );
    // malformed or misspelled config
    fs::write(d.join("bad.json"), "{\"seeed\": 1}").unwrap();
    assert_eq!(
        code(
            d,
            &["prep", "--config", "bad.json", "--in", "t.jsonl", "--out", "o.jsonl"]
        ),
        1
    );
    // corrupt inputs are data errors
    fs::write(d.join("docs.jsonl"), "not json\n").unwrap();
    assert_eq!(
        code(
            d,
            &["vocab", "build", "--docs", "docs.jsonl", "--out", "v.txt"]
        ),
        2
    );
}

#[test]
fn divergence_exits_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tweets(&d.join("tweets.jsonl"), 300);
    ok(d, &["prep", "--in", "tweets.jsonl", "--out", "docs.jsonl"]);
    ok(
        d,
        &[
            "vocab",
            "build",
            "--docs",
            "docs.jsonl",
            "--out",
            "vocab.txt",
            "--size",
            "100",
        ],
    );
    ok(
        d,
        &[
            "examples",
            "--docs",
            "docs.jsonl",
            "--vocab",
            "vocab.txt",
            "--out",
            "shards",
            "--dupe-factor",
            "1",
            "--valid-fraction",
            "0.1",
        ],
    );
    let out = dapt(
        d,
        &[
            "pretrain",
            "--shards",
            "shards",
            "--out",
            "ck",
            "--layers",
            "1",
            "--hidden",
            "16",
            "--heads",
            "2",
            "--ff-dim",
            "32",
            "--lr",
            "1e30",
            "--steps",
            "10",
            "--checkpoint-interval",
            "5",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("step000000"), "{stderr}");
    assert!(d.join("ck/step000000/manifest.json").is_file());
}
