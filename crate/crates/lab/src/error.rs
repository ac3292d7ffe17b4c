use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Malformed TOML or a field with the wrong type or name.
    #[error("{0}")]
    Syntax(String),

    #[error("line {line}: `{field}`: {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: qds_core::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
}

impl LabError {
    pub fn core(context: impl Into<String>, source: qds_core::Error) -> Self {
        LabError::Core {
            context: context.into(),
            source,
        }
    }
}
