/// Crate-wide error type.
///
/// `Numeric` is reserved for NaN/Inf and degenerate-value failures so
/// callers can distinguish them from malformed inputs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up; the message reports the dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// NaN, Inf, or an otherwise degenerate numeric state.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed file contents: audio, manifests, checkpoints, configs.
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
