//! Library side of the `bddm` command-line tool: configuration, synthetic
//! datasets, artifact persistence and the subcommands themselves.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod datasets;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bddm::Error),
    #[error("incompatible artifacts: {0}")]
    Compat(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for config/usage/io, 3 for math/domain failures, 4 for mismatched artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(_) => 3,
            CliError::Compat(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
