use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("diffusion step {step} outside [{min}, {max}]")]
    Step { step: usize, min: usize, max: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sampling error at step {step}: {message}")]
    Sampling { step: usize, message: String },

    #[error("training diverged at step {step} (batch {batch}, t = {timesteps:?}): {message}")]
    Diverged {
        step: usize,
        batch: usize,
        timesteps: Vec<usize>,
        message: String,
    },

    #[error("render error: {0}")]
    Render(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Length(_) => "length",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Step { .. } => "step",
            Error::Numerical(_) => "numerical",
            Error::Data(_) => "data",
            Error::Ingestion(_) => "ingestion",
            Error::Protocol(_) => "protocol",
            Error::Sampling { .. } => "sampling",
            Error::Diverged { .. } => "diverged",
            Error::Render(_) => "render",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
