//! Error type shared by the core algorithms.

/// Errors produced by core tensor, model and metric routines.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Operands have incompatible shapes (size mismatch, wrong channel count,
    /// dimensions not divisible by a required factor, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A scalar argument is outside its documented domain.
    #[error("out of range: {0}")]
    Range(String),

    /// A configuration violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// A computation produced or received a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A label set does not contain enough distinct classes to train on.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
