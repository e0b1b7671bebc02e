//! Finetuning checkpoints on labeled datasets and the statistics reported
//! over a checkpoint × dataset × repeat matrix: macro-F1, SEM and ΔMP (the
//! marginal performance improvement over the untrained step-0 baseline).

mod dataset;
mod finetune;
mod matrix;
mod report;
mod stats;

pub use dataset::{epochs_for, LabeledDataset, DEFAULT_EPOCHS};
pub use finetune::{finetune, FinetuneConfig, FinetuneResult};
pub use matrix::{discover_checkpoints, run_matrix, CellResult, MatrixCheckpoint, MatrixConfig};
pub use report::{
    emit_report, read_report_csv, read_report_json, CsvRow, EvalReport, ReportCell, ReportFiles,
    PLOT_CSV, REPORT_CSV, REPORT_JSON, REPORT_SCHEMA_VERSION,
};
pub use stats::{delta_mp, macro_f1, mean, sem};

use std::path::PathBuf;

use thiserror::Error;

use crate::model::{CheckpointError, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {name}: {msg}")]
    Dataset { name: String, msg: String },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error("checkpoint vocab_size {model} differs from vocabulary size {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("ΔMP is undefined for a baseline F1 of {0}")]
    DeltaMpUndefined(f64),
    #[error("SEM needs at least two values, got {0}")]
    TooFewRepeats(usize),
    #[error("checkpoint list has no step-0 baseline")]
    MissingBaseline,
    #[error("no checkpoints found in {0}")]
    NoCheckpoints(PathBuf),
    #[error("duplicate checkpoint step {0}")]
    DuplicateStep(u64),
    #[error("no datasets")]
    NoDatasets,
    #[error("invalid finetune config: {0}")]
    Config(String),
    #[error("cell state file {path}, line {line}: {msg}")]
    State {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
