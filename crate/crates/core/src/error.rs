use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("conversation {conversation_id}: {message}")]
    Validation {
        conversation_id: String,
        message: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("speaker {speaker} not found in conversation {conversation_id}")]
    UnknownSpeaker {
        conversation_id: String,
        speaker: String,
    },
    #[error("no biography for speaker {speaker} in conversation {conversation_id}")]
    MissingBiography {
        conversation_id: String,
        speaker: String,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("could not parse a label from {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
