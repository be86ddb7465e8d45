//! Error types shared across the crate.

/// Errors produced by tensor operations, network construction, training, and
/// the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that must agree do not; both are named in the message.
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A single-shape constraint was violated (kernel larger than padded
    /// input, window exceeding extent, bad reshape, ...).
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Invalid configuration (bad enum combination, non-dividing subsample
    /// factor, unknown block id, ...).
    #[error("config: {0}")]
    Config(String),

    /// An operation produced a NaN or infinity.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Numeric failure at a higher level (training divergence, degenerate
    /// reductions).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Checkpoint / container format violations.
    #[error("container: {0}")]
    Container(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
