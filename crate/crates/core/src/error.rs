use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid scene graph: {0}")]
    Validation(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: String, value: f64 },

    #[error("instance skipped: {0}")]
    Skip(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}
