use std::path::{Path, PathBuf};

use locret_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("run directory {0} already holds a manifest (pass --force to overwrite)")]
    RunExists(PathBuf),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("rerun mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Process exit status per error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCategory {
    Io = 3,
    Format = 4,
    Invalid = 5,
    Numeric = 6,
    Backend = 7,
    Mismatch = 8,
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn category(&self) -> ExitCategory {
        match self {
            CliError::Io { .. } | CliError::MissingFile(_) => ExitCategory::Io,
            CliError::Format(_) => ExitCategory::Format,
            CliError::RunExists(_) | CliError::Argument(_) => ExitCategory::Invalid,
            CliError::Mismatch(_) => ExitCategory::Mismatch,
            CliError::Core(e) => match e {
                CoreError::Io(_) => ExitCategory::Io,
                CoreError::Parse { .. }
                | CoreError::Json(_)
                | CoreError::VersionMismatch { .. }
                | CoreError::CorruptCheckpoint(_) => ExitCategory::Format,
                CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } => ExitCategory::Numeric,
                CoreError::Backend(_) | CoreError::UnparseableScore { .. } => ExitCategory::Backend,
                _ => ExitCategory::Invalid,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category() as i32
    }
}
