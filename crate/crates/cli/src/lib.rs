//! Pipeline driver behind the `slidekit` binary. Every command is a plain
//! function over a resolved [`PipelineConfig`] so tests can call it without
//! spawning a process.

pub mod commands;
pub mod config;

pub use config::{ConfigLayers, PipelineConfig};

use std::path::Path;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Completed, but produced nothing useful (e.g. no tissue regions).
    pub const WARNING: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Input(_) => exit::INPUT,
            CliError::Numeric(_) => exit::NUMERIC,
        }
    }

    /// Classifies a library error, prefixing `context` (usually a path).
    pub fn from_core(context: impl std::fmt::Display, e: slidekit::Error) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            slidekit::Error::NonFinite(_) => CliError::Numeric(msg),
            slidekit::Error::Encoder { ref reason, .. } if reason.contains("non-finite") => CliError::Numeric(msg),
            _ => CliError::Input(msg),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

/// Command result: success, or success with a warning exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Warning,
}

pub type CliResult<T = Outcome> = Result<T, CliError>;
