use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("dataset {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error("output: {0}")]
    Output(String),

    #[error(transparent)]
    Core(#[from] dalebp_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, reason: impl Into<String>) -> Self {
        HarnessError::Data {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this failure category.
    pub fn exit_code(&self) -> i32 {
        use dalebp_core::Error as E;
        match self {
            HarnessError::Config(_) | HarnessError::Core(E::Config(_)) => 2,
            HarnessError::Data { .. } => 3,
            HarnessError::Io { .. } | HarnessError::Output(_) | HarnessError::Core(E::Io(_)) => 4,
            HarnessError::Core(E::NumericFault { .. }) => 5,
            HarnessError::TraceMismatch(_) => 6,
            HarnessError::Core(E::Format(_)) => 7,
            HarnessError::Core(_) => 1,
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Output(e.to_string())
    }
}
