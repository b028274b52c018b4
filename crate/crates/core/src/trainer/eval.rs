use serde::{Deserialize, Serialize};

use super::rollout::augment;
use super::{CostSource, PolicyModel, TrainerError};
use crate::envs::{true_label, Environment, Step, Trajectory};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub mean_reward: Option<f64>,
    pub mean_true_cost: Option<f64>,
    /// Fraction of episodes whose total true cost stays within the budget.
    pub fraction_safe: Option<f64>,
    pub labeled: u64,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub metrics: EvalMetrics,
    pub trajectories: Vec<Trajectory>,
}

/// Runs `n_episodes` with the mean action. Episode `i` resets with
/// `seed + i`. The cost source only supplies the summary vector.
pub fn evaluate_policy(
    policy: &PolicyModel,
    cost: CostSource<'_>,
    env: &mut dyn Environment,
    n_episodes: usize,
    seed: u64,
    budget: f64,
    labeled: u64,
) -> Result<EvalOutcome, TrainerError> {
    let mut trajectories = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut obs = env.reset(seed.wrapping_add(i as u64));
        let mut h = cost.initial_summary();
        let mut traj = Trajectory::new(i as u64);
        loop {
            let state = augment(&obs, h.as_ref());
            let action = env.canonical_action(&policy.mean_action(&state)?);
            let r = env.step(&action)?;
            if let (CostSource::Ssv(m), Some(cur)) = (cost, h.as_ref()) {
                h = Some(m.step(cur, &obs, &action)?);
            }
            traj.steps.push(Step {
                obs: std::mem::replace(&mut obs, r.obs),
                action,
                reward: r.reward,
                true_cost: r.true_cost,
            });
            if r.done {
                break;
            }
        }
        trajectories.push(traj);
    }
    let n = trajectories.len();
    let metrics = if n == 0 {
        EvalMetrics {
            labeled,
            ..EvalMetrics::default()
        }
    } else {
        let mut safe = 0usize;
        for t in &trajectories {
            safe += usize::from(true_label(t, budget)? == 1);
        }
        EvalMetrics {
            episodes: n,
            mean_reward: Some(trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n as f64),
            mean_true_cost: Some(trajectories.iter().map(Trajectory::total_true_cost).sum::<f64>() / n as f64),
            fraction_safe: Some(safe as f64 / n as f64),
            labeled,
        }
    };
    Ok(EvalOutcome { metrics, trajectories })
}
