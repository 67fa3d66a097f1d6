//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the qfx library.
#[derive(Debug, Error)]
pub enum QfxError {
    /// A non-finite value (NaN or infinity) reached a quantizer or operator.
    #[error("non-finite value {value} in {context}")]
    NonFinite { context: String, value: f64 },

    /// An invalid Q(i,f) format description.
    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    /// Tensor shape mismatch; names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// Batch-norm statistics with non-positive variance.
    #[error("non-positive variance in batch norm: var + eps = {0}")]
    NonPositiveVariance(f64),

    /// Weight-store names do not match the architecture.
    #[error("weight store mismatch: missing {missing:?}, unexpected {extra:?}")]
    WeightMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    /// Malformed weight file.
    #[error("weight file: {0}")]
    WeightFile(String),

    /// Malformed or inconsistent dataset input.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    /// Invalid configuration or argument.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QfxError>;
