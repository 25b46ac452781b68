use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("near-singular blended transform (condition estimate {cond:.3e})")]
    SingularTransform { cond: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
