use std::io;

use axum::http::StatusCode;
use cmdrec_core::features::FeatureError;
use cmdrec_core::preprocess::{LexiconError, SequenceFileError, TriggerFileError};
use cmdrec_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("request needs exactly one of session_id and prefix")]
    AmbiguousRequest,
    #[error("no model loaded")]
    ModelNotLoaded,
    #[error("artifact {path}: {msg}")]
    Artifact { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Triggers(#[from] TriggerFileError),
    #[error(transparent)]
    Sequences(#[from] SequenceFileError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::EmptyPrefix
            | ServiceError::UnknownCommand(_)
            | ServiceError::InvalidK
            | ServiceError::AmbiguousRequest => StatusCode::BAD_REQUEST,
            ServiceError::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
