use std::path::{Path, PathBuf};

use dapt_core::util::write_atomic;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

/// File-output manifests sit next to the file as `<file>.run.json`.
pub const MANIFEST_SUFFIX: &str = ".run.json";

/// Everything needed to repeat a stage: the command line, the fully
/// resolved config (defaults included) and its hash. Passing the manifest
/// back via `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Stage-specific facts (counts, hashes of inputs, output paths).
    pub outputs: serde_json::Value,
}

impl RunManifest {
    pub fn new(
        command: &str,
        argv: &[String],
        config: &RunConfig,
        outputs: serde_json::Value,
    ) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            seed: config.seed(),
            config_hash: config.hash(),
            config: config.clone(),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        log::info!(
            "event=manifest path={} config_hash={}",
            path.display(),
            self.config_hash
        );
        Ok(())
    }
}

/// `<file>.run.json` for a file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(MANIFEST_SUFFIX);
    file.with_file_name(name)
}

/// `<dir>/<command>.run.json` for a directory output.
pub fn inside(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}{MANIFEST_SUFFIX}"))
}
