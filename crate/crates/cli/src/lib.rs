//! Experiment harness: configuration files, parallel runs, CSV/manifest output,
//! cross-optimizer comparison and the property-check front end.

pub mod compare;
pub mod config;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use compare::{compare, Comparison, SummaryRow};
pub use config::{EnvSpec, ExperimentConfig};
pub use run::{run_checks, run_experiment, CheckReport, RunOutcome, CSV_HEADER};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("run {label} aborted: {source} (partial output in {})", csv.display())]
    Runtime {
        label: String,
        csv: PathBuf,
        #[source]
        source: panda::Error,
    },

    #[error("{0}")]
    Failed(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
            CliError::Failed(_) | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

/// Worker pool sized by `PANDA_THREADS` when set, otherwise by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var("PANDA_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("PANDA_THREADS must be a positive integer, got '{value}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}
