use thiserror::Error;

/// Errors emitted by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation
    /// (e.g. a positive argument to `g_tilde`, a non-positive variance).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid input (dimension mismatch, unsorted events, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A variational state violates its invariants (non-PSD covariance,
    /// non-positive Gamma parameters, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// A numerical routine broke down (failed factorization, negative
    /// integral beyond tolerance, diverging fit).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input data (unparsable rows, negative timestamps,
    /// incompatible model files).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
