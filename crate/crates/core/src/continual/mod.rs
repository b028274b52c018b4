//! Feedback buffer, CV-driven selection for labeling, and retraining with
//! rehearsal of older labeled data.

mod buffer;
mod cv;

pub use buffer::{
    FeedbackBuffer, LabelSource, QueueEntry, QueueStatus, RetrainConfig, RetrainReport, SharedBuffer,
    SubmitError,
};
pub use cv::{cv_from_distributions, cv_score, CvEstimate};

use thiserror::Error;

use crate::envs::EnvError;
use crate::safety::SafetyError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinualError {
    #[error("continual usage error: {0}")]
    Usage(String),
    #[error("unknown segment {0}")]
    UnknownSegment(u64),
    #[error("segment {0} already labeled")]
    Duplicate(u64),
    #[error("buffer io error: {0}")]
    Io(String),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}
