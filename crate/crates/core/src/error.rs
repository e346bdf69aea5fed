use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside the mathematical domain of an op (e.g. log of 0).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller broke an API contract (non-scalar backward root, foreign var, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training loss became non-finite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    /// Bad input data. `line` is 1-based and counts the header when reading files.
    #[error("data error{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<u64>, detail: String },

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A numerical self-check (e.g. gradient check) exceeded its tolerance.
    #[error("numeric check failed: {0}")]
    CheckFailed(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn data(line: Option<u64>, detail: impl Into<String>) -> Self {
        Error::Data { line, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the CLI: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::UndefinedMetric(_)
            | Error::CheckFailed(_) => 3,
        }
    }
}
