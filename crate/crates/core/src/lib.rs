//! Command-log mining and feature pipeline for next-command recommendation.
//!
//! The crate covers everything that happens before (and after) the neural
//! model: parsing native design-software logs, reconstructing the command
//! flow users actually produced, encoding sequences with side information,
//! ranking metrics, and a synthetic log generator with known ground truth.

pub mod features;
pub mod logs;
pub mod metrics;
pub mod preprocess;
pub mod synth;

pub use logs::{Action, Category, CommandEvent, LogRecord, Session, TimedEvent, Timestamp};
pub use preprocess::{CleanItem, CleanSequence};
