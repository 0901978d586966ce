use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed input; `location` is a line number or byte offset.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Dimensions or shapes that do not line up.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss. The model as it stood when the
    /// loss was observed is carried along so the caller can persist it.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        model: Box<crate::nn::CnnModel>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl ToString, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
