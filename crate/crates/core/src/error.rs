//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IvsError {
    /// Validation failure on caller-supplied values.
    #[error("invalid input: {message}")]
    InvalidInput { message: String },

    /// A quote file record that could not be parsed or failed validation.
    #[error("quote file line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Target price outside the static arbitrage band; no implied
    /// volatility exists for it.
    #[error("price {price} outside arbitrage band ({lower}, {upper})")]
    PriceOutsideBand { price: f64, lower: f64, upper: f64 },

    /// An iterative routine exhausted its budget without meeting its
    /// tolerance.
    #[error("failed to converge: {message}")]
    NonConvergence { message: String },

    /// Linear-algebra or floating-point breakdown.
    #[error("numerical failure: {message}")]
    Numerical { message: String },
}

pub type Result<T> = std::result::Result<T, IvsError>;

impl IvsError {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        IvsError::InvalidInput { message: message.into() }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        IvsError::Numerical { message: message.into() }
    }
}

/// Rejects non-finite or non-positive values up front so pricing code can
/// assume a sane domain.
pub(crate) fn validate_positive(value: f64, name: &str) -> Result<()> {
    if !value.is_finite() || value <= 0.0 {
        return Err(IvsError::invalid(format!("{name} must be finite and > 0, got {value}")));
    }
    Ok(())
}

pub(crate) fn validate_finite(value: f64, name: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(IvsError::invalid(format!("{name} must be finite, got {value}")));
    }
    Ok(())
}
