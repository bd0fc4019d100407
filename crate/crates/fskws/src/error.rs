use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape contract violated by a tensor primitive or model forward.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: String, detail: String },

    /// A caller-supplied value breaks an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed on-disk data (manifest, WAV, FMAP, WGT1, CSV).
    #[error("parse error: {0}")]
    Parse(String),

    /// Training diverged or hit an unrecoverable state.
    #[error("training error: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
