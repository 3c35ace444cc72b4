//! Experiment front end: configuration, the `run`, `ablate` and `report` commands, and the
//! on-disk artifact layout.
//!
//! A run directory holds
//!
//! - `config.json`: the resolved configuration and its hash,
//! - `manifest.jsonl`: one line per streamed class,
//! - `metrics.jsonl`: one record per task,
//! - `summary.json`: the end-of-run record,
//! - `per_class.csv` and `assigner_weights.csv`,
//! - `checkpoints/task<k>.ckpt`.
//!
//! Every file carries the configuration hash. Randomness flows from the config seed through
//! named sub-seeds: `order` (shuffled scenario), `stream` (instance sampling), `init` and
//! `batching` (inside the trainer).

pub mod config;
pub mod report;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{DatasetSource, ExperimentConfig, Resolved};
pub use report::{cmd_report, Report};
pub use run::{cmd_ablate, cmd_run, AblationReport, Precision, RunOptions, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", describe_config(.file, .field, .line, .message))]
    Config { file: PathBuf, field: Option<&'static str>, line: Option<usize>, message: String },

    #[error("{stage} failed: {message}")]
    Runtime { stage: &'static str, message: String },
}

fn describe_config(file: &std::path::Path, field: &Option<&'static str>, line: &Option<usize>, message: &str) -> String {
    let mut out = format!("config error in {}", file.display());
    if let Some(l) = line {
        out.push_str(&format!(" (line {l})"));
    }
    if let Some(f) = field {
        out.push_str(&format!(", field `{f}`"));
    }
    out.push_str(": ");
    out.push_str(message);
    out
}

impl CliError {
    pub fn runtime(stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Runtime { stage, message: err.to_string() }
    }

    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime { .. } => 1,
        }
    }
}
