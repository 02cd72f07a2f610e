use thiserror::Error;

/// Unified error type for tensor ops, model construction, file formats and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("div: {count} denominator value(s) below magnitude 1e-12; use div_clamped to opt into epsilon clamping")]
    DivisionByZero { count: usize },

    #[error("gradient check failed: max relative error {max_err:.3e} exceeds {threshold:.1e}")]
    GradCheckFailed { max_err: f64, threshold: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
