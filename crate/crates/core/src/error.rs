//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph must contain at least one node")]
    EmptyGraph,

    #[error("node id {id} out of range for graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("code {code} outside the {bits}-bit level range")]
    CodeOutOfRange { code: i64, bits: u8 },

    #[error("diverged at {0}")]
    Divergence(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// An I/O error that names the file involved.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable machine-readable identifier, printed by the CLI and mapped to
    /// status codes by the C interface.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyGraph => "E_EMPTY_GRAPH",
            Error::NodeOutOfRange { .. } => "E_NODE_RANGE",
            Error::Shape { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            Error::CodeOutOfRange { .. } => "E_CODE_RANGE",
            Error::Divergence(_) => "E_DIVERGENCE",
            Error::Parse { .. } => "E_PARSE",
            Error::Format(_) => "E_FORMAT",
            Error::Config { .. } => "E_CONFIG",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}
