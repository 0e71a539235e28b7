use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on a dimension.
    #[error("input shape mismatch in {context}: expected {expected}, got {actual}")]
    InputShape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A precondition on the input values failed.
    #[error("validation error: {0}")]
    Validation(String),

    /// A forward pass produced a non-finite activation.
    #[error("numeric overflow: non-finite activation in layer {layer}")]
    NumericOverflow { layer: usize },

    /// A loss component or gradient block is not finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Prefixes a validation message with the field path it concerns.
    pub(crate) fn in_field(self, path: &str) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("{path}.{m}")),
            other => other,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::InputShape {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
