//! Learned safety models: the recurrent summary-vector model and the
//! cost-and-budget baseline, trained on binary trajectory labels.

mod cb;
mod dataset;
mod loss;
mod ssv;
mod train;

pub use cb::{CbConfig, CbModel};
pub use dataset::{
    build_offline_dataset, load_labeled, save_labeled, Behaviour, LabelRecord, LabeledSegment,
    OfflineSpec, Provenance,
};
pub use loss::{bce_loss, bce_value, PROB_EPS};
pub use ssv::{
    DecoderInput, DistTraining, HeadMode, ScoreDistribution, ScoreSequence, SsvConfig, SsvModel,
    SummaryVector,
};
pub use train::{accuracy, train_model, TrainConfig, TrainReport};

use thiserror::Error;

use crate::envs::{EnvError, Trajectory};
use crate::numerics::{Graph, NumericsError, ParamStore, Rng, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("safety model config error: {0}")]
    Config(String),
    #[error("safety model shape error: {0}")]
    Shape(String),
    #[error("safety model usage error: {0}")]
    Usage(String),
    #[error("labeled dataset io error: {0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// A differentiable estimate of `P(safe | tau)` from labeled segments.
pub trait SafetyModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// `B x 1` column of `log P(safe)` for a batch of segments.
    fn batch_log_prob(&self, g: &mut Graph, batch: &[&Trajectory], rng: &mut Rng) -> Result<Var, SafetyError>;

    /// Inference-time `log P(safe)` of one segment.
    fn log_prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError>;

    fn prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError> {
        Ok(self.log_prob_safe(traj)?.exp())
    }
}
