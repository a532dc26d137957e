//! Error type shared across the pipeline, grouped by how the CLI reports them.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad run configuration: unknown flags, invalid hyper-parameters,
    /// missing config-referenced paths.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or insufficient input data: CSV parse failures, empty
    /// training spans, unusable records.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: non-finite values, degenerate batches, optimizer
    /// aborts.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Shape disagreement between tensor operands.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A module-boundary precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric/internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
            Error::Numeric(_) | Error::Dimension { .. } | Error::Contract(_) => 4,
        }
    }
}
