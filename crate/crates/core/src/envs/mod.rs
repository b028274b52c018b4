//! Environments with hidden binary costs, the trajectory container, and the
//! ground-truth labeling rule used as the scripted oracle.
//!
//! Costs and the budget stay on this side of the API: learners only see
//! observations, actions and rewards. The oracle labeler and the evaluation
//! metrics are the only readers of `true_cost`.

mod chain;
mod hazard_point;
pub mod scripted;
mod trajectory;

pub use chain::{ChainMdp, ChainParams};
pub use hazard_point::{Hazard, HazardPoint, HazardPointParams};
pub use trajectory::{read_trajectories, write_trajectories, Step, StepRecord, Trajectory};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("environment config error: {0}")]
    Config(String),
    #[error("environment usage error: {0}")]
    Usage(String),
    #[error("trajectory io error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub true_cost: f64,
    pub done: bool,
    pub step_index: usize,
}

/// Drawing metadata for the labeling UI. Describes geometry only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvGeometry {
    HazardPoint {
        circle_radius: f64,
        arena: f64,
        hazards: Vec<Hazard>,
    },
    Chain {
        states: usize,
    },
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
    fn geometry(&self) -> EnvGeometry;

    /// The action as the environment executes it. Learners record this form.
    fn canonical_action(&self, action: &[f64]) -> Vec<f64> {
        action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
    }
}

pub const HAZARD_POINT: &str = "hazard_point";
pub const CHAIN: &str = "chain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub id: String,
    pub horizon: usize,
    pub budget: f64,
    pub gamma: f64,
    pub seed: u64,
    pub hazard_point: HazardPointParams,
    pub chain: ChainParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            id: HAZARD_POINT.into(),
            horizon: 200,
            budget: 25.0,
            gamma: 0.99,
            seed: 0,
            hazard_point: HazardPointParams::default(),
            chain: ChainParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn hazard_point() -> Self {
        Self::default()
    }

    pub fn chain(horizon: usize) -> Self {
        Self {
            id: CHAIN.into(),
            horizon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.id != HAZARD_POINT && self.id != CHAIN {
            return Err(EnvError::Config(format!("unknown environment id `{}`", self.id)));
        }
        if self.horizon < 1 {
            return Err(EnvError::Config("horizon must be at least 1".into()));
        }
        if !(self.budget > 0.0) {
            return Err(EnvError::Config("budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(EnvError::Config("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        self.validate()?;
        match self.id.as_str() {
            HAZARD_POINT => Ok(Box::new(HazardPoint::new(
                self.hazard_point.clone(),
                self.horizon,
                self.seed,
            ))),
            _ => Ok(Box::new(ChainMdp::new(
                self.chain.clone(),
                self.horizon,
                self.seed,
            )?)),
        }
    }

    pub fn oracle(&self) -> LabelOracle {
        LabelOracle {
            budget: self.budget,
        }
    }
}

/// Ground-truth labeling rule: safe (1) iff the segment's total cost stays
/// within the budget. A cost equal to the budget is safe.
pub fn true_label(traj: &Trajectory, budget: f64) -> Result<u8, EnvError> {
    if traj.is_empty() {
        return Err(EnvError::Usage("cannot label an empty trajectory".into()));
    }
    Ok(u8::from(traj.total_true_cost() <= budget))
}

/// Scripted stand-in for an annotator who knows the hidden budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelOracle {
    budget: f64,
}

impl LabelOracle {
    pub fn new(budget: f64) -> Self {
        Self { budget }
    }

    pub fn label(&self, traj: &Trajectory) -> Result<u8, EnvError> {
        true_label(traj, self.budget)
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }
}
