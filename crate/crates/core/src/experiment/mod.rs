//! Experiment orchestration: run configs, training runs, evaluation,
//! credit-assignment analysis and the labeling service.

mod analysis;
mod config;
mod eval;
mod run;
pub mod service;

pub use analysis::{
    analyze, analyze_scores, crossing_step, flat_region_ratio, run_analyze, window_ratios, write_report, AnalysisConfig,
    AnalysisReport, BucketStat, TrajectoryAnalysis, WindowStat,
};
pub use config::{
    ContinualConfig, EvalConfig, LabelingMode, PretrainConfig, RunConfig, OUTPUT_VAR, SEED_VAR,
};
pub use eval::{run_eval, EvalReport};
pub use run::{
    append_jsonl, load_run, pretrain, run_seed, run_train, seed_dir, IterationRecord, LearnedModel, Pretrained,
    RunHooks, RunStatus, RunSummary, SeedResult, SharedStatus, Stat,
};

use thiserror::Error;

use crate::continual::ContinualError;
use crate::envs::EnvError;
use crate::numerics::NumericsError;
use crate::safety::SafetyError;
use crate::trainer::TrainerError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("malformed run artifact: {0}")]
    Structure(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Continual(#[from] ContinualError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
