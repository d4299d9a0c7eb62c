use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a tensor that is not on the tape")]
    Detached,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} out of range: {value} (valid {valid})")]
    OutOfRange {
        what: &'static str,
        value: String,
        valid: String,
    },

    #[error("overlap target {target} unattainable, achievable range [{min:.4}, {max:.4}]")]
    UnattainableOverlap { target: f64, min: f64, max: f64 },

    #[error("grid of {cells} cells exceeds exact EMD limit {limit}; use the sinkhorn approximation")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("sinkhorn did not converge after {iters} iterations (marginal residual {residual:e})")]
    SinkhornNotConverged { iters: usize, residual: f64 },

    #[error("transport plan failed its optimality certificate (gap {0:e})")]
    Uncertified(f64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("truncated input at byte offset {offset}: {context}")]
    Truncated { offset: u64, context: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Checksum {
        stored: u32,
        computed: u32,
        /// Why the body also fails to parse, when it does.
        detail: Option<String>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("training diverged: {term} became non-finite at epoch {epoch}, batch {batch}")]
    Diverged {
        term: String,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
