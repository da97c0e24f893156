//! Error types shared across the crate.

use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A record file failed to parse; `line` is 1-based.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// An input violated a contract (duplicate id, bad dimension, empty text, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A prompt template could not be found or rendered.
    #[error("template error: {0}")]
    Template(String),

    /// A backend call failed after exhausting retries.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// A backend reported a non-retryable error; the message is surfaced verbatim.
    #[error("backend error: {0}")]
    Backend(String),

    /// A model response could not be parsed into the expected structure.
    #[error("extraction error: {message}")]
    Extraction { message: String, raw: String },

    /// Campaign manifest or configuration problem.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    /// Wraps another error with the query it occurred on.
    #[error("query {query_id}: {source}")]
    ForQuery {
        query_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn extraction(message: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::Extraction {
            message: message.into(),
            raw: raw.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    /// Attach the query id this error occurred on.
    pub fn for_query(self, query_id: impl Into<String>) -> Self {
        Error::ForQuery {
            query_id: query_id.into(),
            source: Box::new(self),
        }
    }
}
