//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by the kernel library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{module}: shape mismatch: {detail}")]
    ShapeMismatch { module: &'static str, detail: String },

    #[error("{module}: dtype mismatch: expected {expected}, got {got}")]
    DtypeMismatch {
        module: &'static str,
        expected: &'static str,
        got: &'static str,
    },

    #[error("{module}: invalid config: {detail}")]
    InvalidConfig { module: &'static str, detail: String },

    #[error("{module}: invalid value: {detail}")]
    InvalidValue { module: &'static str, detail: String },

    #[error("{module}: non-finite value encountered: {detail}")]
    NonFinite { module: &'static str, detail: String },

    #[error("tensor file: bad magic {0:?}, expected \"HRGT\"")]
    BadMagic([u8; 4]),

    #[error("tensor file: unsupported version {0}, expected 1")]
    UnsupportedVersion(u8),

    #[error("tensor file: unsupported dtype code {0}")]
    UnsupportedDtypeCode(u8),

    #[error("tensor file: truncated payload: declared {declared} bytes, found {found}")]
    TruncatedPayload { declared: usize, found: usize },

    #[error("tensor file: {0} trailing bytes after declared payload")]
    TrailingBytes(usize),

    #[error("graph: zero row sum in adjacency at node {node}: isolated node with self-loops disabled")]
    ZeroRowSum { node: usize },

    #[error("metrics: labels contain a single class; need at least one positive and one negative")]
    SingleClassLabels,

    #[error("gradcheck: forward produced non-finite output for op {op} at input {input}")]
    NonFiniteForward { op: String, input: usize },

    #[error("harness: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(module: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            module,
            detail: detail.into(),
        }
    }

    pub fn config(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            module,
            detail: detail.into(),
        }
    }

    pub fn value(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidValue {
            module,
            detail: detail.into(),
        }
    }

    pub fn non_finite(module: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            module,
            detail: detail.into(),
        }
    }

    /// True for failures of numerical origin (NaN, gradient checks), as
    /// opposed to validation or I/O problems. The CLI maps these to a
    /// distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteForward { .. }
                | Error::NonFiniteLoss { .. }
                | Error::ZeroRowSum { .. }
        )
    }
}
