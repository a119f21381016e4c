use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("negative cost parameter for expert {expert}: {what} = {value}")]
    NegativeCost {
        expert: usize,
        what: &'static str,
        value: f64,
    },
    #[error("alpha + beta = {sum} > 1 for expert {expert}; tau would leave [0, 1] (use permissive mode)")]
    TauOutOfRange { expert: usize, sum: f64 },
    #[error("cost vector has zero l1 norm")]
    ZeroVector,
    #[error("cost vector entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("invalid span ({start}, {end}): only the (-1, -1) sentinel may be negative")]
    InvalidSpan { start: i64, end: i64 },
    #[error("agent index {index} out of range for {num_agents} agents")]
    BadAgent { index: usize, num_agents: usize },
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty log")]
    EmptyLog,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("exact match is zero; GFLOPs/EM is unbounded")]
    DivisionByZero,
    #[error("u = {0} outside [0, 1]")]
    DomainError(f64),
    #[error("t = {t} outside [0, {max}]")]
    OutOfRange { t: f64, max: f64 },
    #[error("expected tau vector has a negative entry ({value}); bound requires strict costs")]
    NonNegativeTauViolated { value: f64 },
    #[error("bad world spec: {0}")]
    BadSpec(String),
    #[error("model file format mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("{path}:{line}: parse error: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: inconsistent dimensions: {reason}")]
    InconsistentDims { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: duplicate query_id {id:?}")]
    DuplicateQueryId { path: PathBuf, line: usize, id: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
