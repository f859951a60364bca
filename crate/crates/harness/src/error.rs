use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad command-line usage; exit code 1.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed configuration, data or results file.
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] camml_core::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            _ => 2,
        }
    }
}

impl From<camml_core::tensor::TensorError> for HarnessError {
    fn from(e: camml_core::tensor::TensorError) -> Self {
        Self::Core(e.into())
    }
}

impl From<camml_core::datastore::DatastoreError> for HarnessError {
    fn from(e: camml_core::datastore::DatastoreError) -> Self {
        Self::Core(e.into())
    }
}

impl From<camml_core::encoders::EncoderError> for HarnessError {
    fn from(e: camml_core::encoders::EncoderError) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
