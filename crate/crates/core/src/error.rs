use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the lab. CLI exit codes are derived from [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error(
        "non-finite loss at batch {batch}: task={task} sparsity={sparsity} contiguity={contiguity}"
    )]
    NonFinite {
        batch: usize,
        task: f64,
        sparsity: f64,
        contiguity: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Contract(_) => 1,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::VocabMismatch(_)
            | Error::Io { .. }
            | Error::Checkpoint(_) => 2,
            Error::NonFinite { .. } | Error::DegenerateMask(_) | Error::Dimension { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
