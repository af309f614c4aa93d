//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming the operation and both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside the mathematical domain of an operation (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A caller violated an operation's contract (non-scalar loss, empty
    /// batch, index out of range).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// Invalid data (out-of-range label, wrong vector length), naming the
    /// offending sample.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
