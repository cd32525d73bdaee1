//! Crate-wide error type.

/// Errors across the codec: shape/config contract violations, coding and
/// container failures, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents violate an operation's shape contract.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Invalid or inconsistent configuration (groups, heads, channel counts).
    #[error("configuration error: {0}")]
    Config(String),
    /// An API contract was violated (non-scalar loss, malformed mask, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Symbol out of range or coder misuse during encoding.
    #[error("coding error: {0}")]
    Coding(String),
    /// Corrupt or truncated bitstream.
    #[error("decode error at byte {pos}: {msg}")]
    Decode { pos: usize, msg: String },
    /// Malformed container or checkpoint file.
    #[error("format error: {0}")]
    Format(String),
    /// Checkpoint and bitstream disagree on model configuration.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
