use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented invariant (weights outside [0,1], NaN losses, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// An index or timestep fell outside its admissible range.
    #[error("range error: {0}")]
    Range(String),
    /// Inconsistent or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A persisted file could not be decoded.
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    /// Numerical failure (singular systems, non-finite gradients that could not be recovered).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The inputs were degenerate in a way that makes the operation meaningless.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
