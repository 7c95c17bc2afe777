use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] enkf_core::Error),

    #[error("writing results: {0}")]
    Output(String),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
