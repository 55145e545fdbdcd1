use tensorcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable, machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Shape { .. }) => "dimension",
            Error::Tensor(TensorError::Numeric { .. }) | Error::Numeric(_) => "numeric",
            Error::Tensor(TensorError::Contract { .. }) | Error::Contract(_) => "contract",
            Error::Tensor(TensorError::Format(_)) | Error::Format(_) => "format",
            Error::Tensor(TensorError::Io(_)) | Error::Io(_) => "io",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
