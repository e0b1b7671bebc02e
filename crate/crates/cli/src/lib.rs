//! `dapt` command-line front end.

mod commands;
pub mod config;
mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dapt_core::corpus::PrepError;
use dapt_core::eval::EvalError;
use dapt_core::examples::{GenerateError, ShardError};
use dapt_core::model::{CheckpointError, ModelError};
use dapt_core::tokenizer::VocabError;
use dapt_core::train::TrainError;

pub use config::RunConfig;
pub use manifest::{RunManifest, MANIFEST_SUFFIX};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or parameter values.
    Usage(String),
    /// Missing, malformed or inconsistent inputs; I/O failures.
    Data(String),
    /// Non-finite losses or parameters.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PrepError> for CliError {
    fn from(e: PrepError) -> Self {
        match e {
            PrepError::Threshold(_) => CliError::Usage(e.to_string()),
            PrepError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::TargetTooSmall { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::DupeFactor
            | GenerateError::ShardCount
            | GenerateError::ValidFraction(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ShardError> for CliError {
    fn from(e: ShardError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            ModelError::InExample { source, .. }
                if matches!(**source, ModelError::NonFinite { .. }) =>
            {
                CliError::Numeric(e.to_string())
            }
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::ModelConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) | EvalError::TooFewRepeats(_) => CliError::Usage(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Checkpoint(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Domain-adaptive pretraining toolkit: corpus prep, vocabulary, pretraining
/// examples, encoder pretraining and checkpoint-matrix evaluation.
#[derive(Debug, Parser)]
#[command(name = "dapt", version)]
pub struct Cli {
    /// JSON run config (or a previous run manifest); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, deduplicate and sentence-split a raw tweet file.
    Prep(PrepArgs),
    /// Build or inspect a WordPiece vocabulary.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Generate sharded MLM + NSP pretraining examples.
    Examples(ExamplesArgs),
    /// Pretrain the encoder, writing periodic checkpoints.
    Pretrain(PretrainArgs),
    /// Finetune one checkpoint on one dataset and print its dev macro-F1.
    Finetune(FinetuneArgs),
    /// Finetune every checkpoint on every dataset, repeatedly, and report.
    EvalMatrix(EvalMatrixArgs),
    /// Re-emit CSV files from a report JSON and print a summary table.
    Report(ReportArgs),
    /// Inspect model configurations and checkpoints.
    #[command(subcommand)]
    Model(ModelCommand),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Raw tweets (JSON lines with `id` and `text`).
    #[arg(long = "in", visible_alias = "input", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output sentence documents (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reject log; defaults to `<out>.rejects.jsonl`.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Emoji shortcode table (`codepoint<TAB>name`); defaults to the built-in one.
    #[arg(long)]
    pub emoji_table: Option<PathBuf>,
    /// Jaccard similarity at or above which a tweet is a near-duplicate.
    #[arg(long)]
    pub dedup_threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum VocabCommand {
    /// Induce a vocabulary from sentence documents.
    Build(VocabBuildArgs),
    /// Print a vocabulary summary, optionally tokenizing some text.
    Inspect(VocabInspectArgs),
}

#[derive(Debug, Args)]
pub struct VocabBuildArgs {
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Target vocabulary size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VocabInspectArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Text to tokenize.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExamplesArgs {
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output shard directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Passes over the corpus, each with fresh pairing and masking.
    #[arg(long)]
    pub dupe_factor: Option<usize>,
    /// Number of training shard files.
    #[arg(long = "shards")]
    pub num_shards: Option<usize>,
    /// Fraction of documents held out for validation.
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Shard directory written by `examples`.
    #[arg(long)]
    pub shards: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the per-dataset epoch policy.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory with `<name>.train.csv` / `<name>.dev.csv`.
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    #[arg(long)]
    pub dataset: String,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the result (and its run manifest) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalMatrixArgs {
    /// A checkpoint directory or a directory of them (must include step 0).
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Seed of repeat 0.
    #[arg(long = "base-seed", visible_alias = "seed")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
    /// Report directory; finished cells are kept in `cells.jsonl` there.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json`; defaults to the one in the configured reports dir.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Where to write the CSV files; defaults to the report's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Print a model config and its parameter counts.
    Describe(DescribeArgs),
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Describe this checkpoint instead of the configured model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with = "vocab")]
    pub vocab_size: Option<usize>,
    /// Take the vocabulary size from this file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    // repeated in-process calls keep the first logger
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, rec| {
            writeln!(
                buf,
                "ts={} level={} target={} {}",
                buf.timestamp_millis(),
                rec.level().as_str().to_lowercase(),
                rec.target(),
                rec.args()
            )
        })
        .try_init();
}

/// The effective config of a parsed command line: flags over `--config`
/// over defaults.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let file = cli.config.as_deref().map(RunConfig::load).transpose()?;
    RunConfig::merge(file, &commands::flag_config(&cli.command))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    let args: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match pool.install(|| commands::dispatch(&cli, &args)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!(
                "event=failed exit_code={} error={:?}",
                e.exit_code(),
                e.message()
            );
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
