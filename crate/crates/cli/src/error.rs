use std::io;
use std::path::{Path, PathBuf};

use omla_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },

    /// An artifact exists but does not belong to the consuming config.
    #[error("artifact {} does not match: {reason}", path.display())]
    Mismatch { path: PathBuf, reason: String },

    #[error("corrupt artifact {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            LabError::Missing { path: path.to_path_buf(), reason: source.to_string() }
        } else {
            LabError::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        LabError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
    }

    pub fn mismatch(path: &Path, reason: impl Into<String>) -> Self {
        LabError::Mismatch { path: path.to_path_buf(), reason: reason.into() }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for missing
    /// artifacts, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Mismatch { .. } => 2,
            LabError::Core(e) if e.is_numeric() => 3,
            LabError::Core(CoreError::Config(_)) => 2,
            LabError::Missing { .. } => 4,
            _ => 1,
        }
    }
}
