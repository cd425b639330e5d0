use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// The variants map onto the three failure classes the CLI distinguishes:
/// invalid input (`Domain`, `Config`, `DimensionMismatch`, `Range`),
/// numerical breakdown (`Numerical`, `Divergence`, `NonContraction`) and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample out of spatial box: observed [{observed_min}, {observed_max}], box [{box_min}, {box_max}]")]
    Range {
        observed_min: f64,
        observed_max: f64,
        box_min: f64,
        box_max: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sewing sums diverge: {diagnostics}")]
    Divergence { diagnostics: String },

    #[error("Picard iteration failed to contract after {halvings} window halvings: {diagnostics}")]
    NonContraction { halvings: u32, diagnostics: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures caused by bad input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::DimensionMismatch { .. } | Error::Range { .. } | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
