//! Library side of the `qerl` binary: run configs, run directories and the
//! subcommand bodies, kept here so tests can drive them without a process.

mod config;
mod run;
mod tools;

pub use config::{RunConfig, WeightFormat, KEY_DOCS};
pub use run::{
    ablate, ablation_table, ablation_variants, pretrain_base, run_training, AblationAxis, AblationRow, RunSummary,
};
pub use tools::{bench_codec, export_tasks, inspect, plotdata, quantize_archive, QuantizeMode};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Train(#[from] crate::rl::RlError),
    #[error("{0}")]
    Plot(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable short code printed as `error[code]: …`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Quant(_) => "quant",
            CliError::Nn(_) => "model",
            CliError::Task(_) => "task",
            CliError::Train(crate::rl::RlError::NonFiniteLoss { .. }) => "nan",
            CliError::Train(_) => "train",
            CliError::Plot(_) => "plot",
            CliError::Usage(_) => "usage",
        }
    }

    /// Process exit code; distinct per class so scripts can branch on it.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Train(crate::rl::RlError::NonFiniteLoss { .. }) => 4,
            _ => 1,
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
