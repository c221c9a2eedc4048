use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value encountered in {op}")]
    NumericDomain { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    Vocabulary { index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("graph construction failed: {0}")]
    Graph(String),

    #[error("synthetic corpus spec rejected: {0}")]
    SyntheticSpec(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Checkpoint(_) | Error::Contract(_) | Error::Shape { .. } => {
                ErrorClass::Config
            }
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Graph(_)
            | Error::SyntheticSpec(_)
            | Error::Vocabulary { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::NumericDomain { .. } | Error::Diverged { .. } => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
