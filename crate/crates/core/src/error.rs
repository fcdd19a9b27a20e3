use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the diagnostic pipeline.
///
/// The variants map onto the CLI exit-code contract: [`Error::ContractMismatch`]
/// exits with 3, [`Error::NonFinite`] with 4, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("header parse failure: {0}")]
    Header(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("intervention error: {0}")]
    Spec(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("contract mismatch: baseline was computed under `{baseline}`, evaluation uses `{current}`")]
    ContractMismatch { baseline: String, current: String },

    #[error("evaluator budget exhausted ({consumed}/{budget} calls)")]
    BudgetExhausted { budget: usize, consumed: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
