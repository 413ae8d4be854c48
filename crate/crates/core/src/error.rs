use std::fmt;

use thiserror::Error;

use crate::engine::GenerationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Wire-level error codes a backend may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Capacity,
    BadRequest,
    Unsupported,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Capacity => "capacity",
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::Unsupported => "unsupported",
            ErrorCode::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter (temperature, k, frame rate, ...) is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data violates a structural invariant (lengths, finiteness, ranges).
    #[error("invalid input: {0}")]
    Input(String),

    /// A score document could not be parsed.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A score failed validation; carries the rendered error diagnostics.
    #[error("score is invalid: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// The schedule cannot be compiled (windows collide or overflow a segment).
    #[error("compile error: {0}")]
    Compile(String),

    /// The backend answered with an error or an ill-formed message.
    #[error("backend protocol error ({code}): {message}")]
    Protocol { code: ErrorCode, message: String },

    #[error("context capacity exceeded: {0}")]
    Capacity(String),

    #[error("backend capability missing: {0}")]
    Unsupported(String),

    #[error("protocol version mismatch: client {client}, backend {backend}")]
    VersionMismatch { client: String, backend: String },

    #[error("timed out after {0:?} waiting for backend")]
    Timeout(std::time::Duration),

    #[error("backend connection closed")]
    Disconnected,

    /// Generation stopped early; the frames produced so far are kept.
    #[error("generation aborted after {} frames: {source}", .partial.frames.len())]
    Aborted {
        partial: Box<GenerationResult>,
        #[source]
        source: Box<Error>,
    },

    #[error("planner: {0}")]
    Planner(String),

    #[error("http: {0}")]
    Http(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn protocol(code: ErrorCode, message: impl Into<String>) -> Self {
        Error::Protocol {
            code,
            message: message.into(),
        }
    }

    /// The wire code a backend server should report for this error.
    pub fn wire_code(&self) -> ErrorCode {
        match self {
            Error::Capacity(_) => ErrorCode::Capacity,
            Error::Unsupported(_) => ErrorCode::Unsupported,
            Error::Protocol { code, .. } => *code,
            Error::Parameter(_) | Error::Input(_) | Error::Parse { .. } | Error::Json(_) => {
                ErrorCode::BadRequest
            }
            _ => ErrorCode::Internal,
        }
    }

    /// The message a backend server should send alongside [`wire_code`](Self::wire_code).
    pub fn wire_message(&self) -> String {
        match self {
            Error::Capacity(m) | Error::Unsupported(m) | Error::Input(m) | Error::Parameter(m) => m.clone(),
            Error::Protocol { message, .. } => message.clone(),
            other => other.to_string(),
        }
    }
}
