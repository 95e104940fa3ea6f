use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing {artifact}; run `nextcat {command}` first")]
    Prerequisite { artifact: PathBuf, command: &'static str },

    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] nextcat_core::Error),

    #[error("{0}")]
    Check(String),
}

pub type CliResult<T> = Result<T, CliError>;
