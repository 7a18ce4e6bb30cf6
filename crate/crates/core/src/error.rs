use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("non-finite value at sample {sample}, channel {channel}, timestep {timestep}")]
    NonFiniteInput {
        sample: usize,
        channel: usize,
        timestep: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn param_err(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
