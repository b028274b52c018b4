//! PPO-Lagrangian over the summary-augmented state, with the learned
//! pseudo-cost (`ssv`), the cost-and-budget baseline (`cb`), or the true
//! environment cost (`oracle`).

mod enumerate;
mod eval;
mod gae;
mod policy;
mod ppo;
mod rollout;

pub use enumerate::{chain_constrained_optimum, exact_chain_evaluation, ChainOptimum, ExactEvaluation};
pub use eval::{evaluate_policy, EvalMetrics, EvalOutcome};
pub use gae::gae;
pub use policy::{gaussian_log_prob, ActOutput, PolicyConfig, PolicyModel, LOG_STD_MAX, LOG_STD_MIN};
pub use ppo::{ppo_lagrangian_update, PpoTrainer, UpdateDiagnostics};
pub use rollout::{collect_rollout, jensen_gap, CostSource, EpisodeStats, RolloutBatch};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvError;
use crate::numerics::NumericsError;
use crate::safety::SafetyError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainerError {
    #[error("trainer config error: {0}")]
    Config(String),
    #[error("trainer shape error: {0}")]
    Shape(String),
    #[error("trainer usage error: {0}")]
    Usage(String),
    #[error("rollout aborted after {steps} steps: {source}")]
    Rollout { steps: usize, source: EnvError },
    #[error("non-finite update: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Ssv,
    Cb,
    Oracle,
}

/// How a trajectory budget is turned into a discounted per-episode limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScaling {
    /// `(b / T) * (1 - gamma^T) / (1 - gamma)`: the budget spread evenly over
    /// the horizon, then discounted.
    PerStepRate,
    /// The budget itself.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    /// Discount of the cost stream and of `J_c`; `None` uses `gamma`.
    pub cost_gamma: Option<f64>,
    pub gae_lambda: f64,
    pub clip: f64,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub lambda_lr: f64,
    pub init_lambda: f64,
    /// Required probability of a safe trajectory.
    pub d: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub budget_scaling: BudgetScaling,
    pub hidden: usize,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            cost_gamma: None,
            gae_lambda: 0.95,
            clip: 0.2,
            rollout_steps: 4096,
            epochs: 4,
            minibatch: 256,
            policy_lr: 3e-4,
            critic_lr: 1e-3,
            lambda_lr: 0.05,
            init_lambda: 0.0,
            d: 0.9,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            budget_scaling: BudgetScaling::PerStepRate,
            hidden: 64,
            init_log_std: -0.5,
        }
    }
}

impl PpoConfig {
    pub fn cost_discount(&self) -> f64 {
        self.cost_gamma.unwrap_or(self.gamma)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cost_discount()) {
            return bad("cost_gamma must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.rollout_steps == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("rollout_steps, epochs and minibatch must be positive");
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return bad("d must lie in (0, 1]");
        }
        if self.init_lambda < 0.0 || self.lambda_lr < 0.0 {
            return bad("lambda and its learning rate must be non-negative");
        }
        Ok(())
    }
}

/// `c = -log P_t`. Scores must be non-positive.
pub fn pseudo_cost(log_score: f64) -> Result<f64, TrainerError> {
    if log_score > 0.0 || log_score.is_nan() {
        return Err(TrainerError::Usage(format!("log score {log_score} is positive")));
    }
    Ok(-log_score)
}

/// `l = -log d` for the learned-constraint modes.
pub fn constraint_limit(d: f64) -> Result<f64, TrainerError> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(TrainerError::Config("d must lie in (0, 1]".into()));
    }
    Ok(-d.ln())
}

/// Discounted per-episode limit for a cumulative budget.
pub fn budget_limit(budget: f64, horizon: usize, gamma: f64, scaling: BudgetScaling) -> f64 {
    match scaling {
        BudgetScaling::Raw => budget,
        BudgetScaling::PerStepRate => {
            let t = horizon.max(1) as f64;
            let disc = if gamma >= 1.0 {
                t
            } else {
                (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
            };
            budget / t * disc
        }
    }
}

/// Projected dual ascent: `max(0, lambda + lr * (j_c - limit))`.
pub fn lambda_update(lambda: f64, j_c: f64, limit: f64, lr: f64) -> f64 {
    (lambda + lr * (j_c - limit)).max(0.0)
}

/// The same step written against the safe-probability form of the
/// constraint, `E[sum gamma^t log P_t] >= log d`.
pub fn lambda_update_log_form(lambda: f64, mean_disc_log_score: f64, log_d: f64, lr: f64) -> f64 {
    lambda_update(lambda, -mean_disc_log_score, -log_d, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_cost_examples() {
        assert_eq!(pseudo_cost(-0.2).unwrap(), 0.2);
        assert_eq!(pseudo_cost(0.0).unwrap(), 0.0);
        assert!(matches!(pseudo_cost(0.1), Err(TrainerError::Usage(_))));
        assert!((constraint_limit(0.9).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-15);
        assert!(constraint_limit(0.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let l = constraint_limit(0.9).unwrap();
        assert_eq!(lambda_update(0.0, 0.05, l, 0.1), 0.0);
        assert!((lambda_update(0.0, 0.2, l, 0.1) - 0.009_463_948_434_217_37).abs() < 1e-15);
    }

    #[test]
    fn log_form_is_bit_identical() {
        for &(lam, j) in &[(0.0, 0.2), (0.3, 0.01), (1.7, 0.1053), (0.0, 0.0)] {
            let a = lambda_update(lam, j, -(0.9f64).ln(), 0.05);
            let b = lambda_update_log_form(lam, -j, (0.9f64).ln(), 0.05);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn budget_limit_scaling() {
        let l = budget_limit(25.0, 200, 0.99, BudgetScaling::PerStepRate);
        assert!((l - 0.125 * (1.0 - 0.99f64.powi(200)) / 0.01).abs() < 1e-12);
        assert_eq!(budget_limit(25.0, 200, 1.0, BudgetScaling::PerStepRate), 25.0);
        assert_eq!(budget_limit(25.0, 200, 0.99, BudgetScaling::Raw), 25.0);
    }
}
