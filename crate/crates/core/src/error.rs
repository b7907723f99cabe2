use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("schema error in frame `{frame_id}`, field `{field}`: {message}")]
    Schema {
        frame_id: String,
        field: String,
        message: String,
    },

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite values produced by `{layer}`")]
    Numeric { layer: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn schema(frame_id: &str, field: &str, message: impl Into<String>) -> Self {
        Error::Schema {
            frame_id: frame_id.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Vocabulary(_)
            | Error::Schema { .. }
            | Error::Index { .. }
            | Error::Validation(_)
            | Error::Evaluation(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Image(_)
            | Error::Csv(_) => 3,
            Error::Numeric { .. } | Error::Candle(_) => 1,
        }
    }
}
