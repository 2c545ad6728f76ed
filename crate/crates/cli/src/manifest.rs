use std::path::{Path, PathBuf};

use o1loom_core::data::write_atomic;
use o1loom_core::{to_canonical_json, Digest, StatsSnapshot};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Written next to every output as `<out>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: String,
    pub config_digest: Digest,
    pub dataset_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experience_digest: Option<Digest>,
    pub output_digest: Digest,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub remote_calls: u64,
    pub retries: u64,
    pub failures: u64,
    /// Samples whose inference failed.
    pub failed_samples: u64,
    pub warnings: u64,
    pub wall_time_ms: u64,
    pub tool_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_checkpoint: Option<usize>,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: Digest, dataset_digest: Digest, output_digest: Digest, seed: u64) -> Self {
        Self {
            command: command.to_owned(),
            command_line: command_line(),
            config_digest,
            dataset_digest,
            experience_digest: None,
            output_digest,
            cache_hits: 0,
            cache_misses: 0,
            remote_calls: 0,
            retries: 0,
            failures: 0,
            failed_samples: 0,
            warnings: 0,
            wall_time_ms: 0,
            tool_version: TOOL_VERSION.to_owned(),
            seed,
            checkpoint_scores: None,
            selected_checkpoint: None,
        }
    }

    pub fn with_stats(mut self, s: StatsSnapshot) -> Self {
        self.cache_hits = s.cache_hits;
        self.cache_misses = s.cache_misses;
        self.remote_calls = s.remote_calls;
        self.retries = s.retries;
        self.failures = s.failures;
        self
    }

    pub fn path_for(out: &Path) -> PathBuf {
        sidecar(out, "manifest.json")
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = Self::path_for(out);
        let mut text = serde_json::to_string_pretty(self).map_err(CliError::internal)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(CliError::internal)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// `<out>.<suffix>` in the same directory as `out`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Line-delimited canonical JSON.
pub fn jsonl<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&to_canonical_json(r).map_err(CliError::internal)?);
        out.push('\n');
    }
    Ok(out)
}
