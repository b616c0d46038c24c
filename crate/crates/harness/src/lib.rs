//! Experiment harness around `asgd-core`: configuration files, named
//! experiment recipes, CSV and manifest output, plot data, and the
//! acceptance battery.

pub mod acceptance;
pub mod config;
pub mod experiment;
pub mod plotdata;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiment::{replay, run_experiment, RunReport};

/// Process exit codes of the `asgd` binary.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const ACCEPTANCE: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Core(#[from] asgd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("{failed} acceptance criteria failed")]
    Acceptance { failed: usize },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => exit::CONFIG,
            HarnessError::Acceptance { .. } => exit::ACCEPTANCE,
            _ => exit::RUNTIME,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
