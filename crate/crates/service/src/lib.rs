//! Runtime around the recommender: log tailing, online preprocessing,
//! HTTP prediction endpoints and the `cmdrec` command-line tools.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod http;
pub mod predictor;
pub mod session;
pub mod tail;

pub use error::{Result, ServiceError};
pub use predictor::{Prediction, Predictor};
pub use session::{OnlinePipeline, SessionStore};
pub use tail::LogTailer;
