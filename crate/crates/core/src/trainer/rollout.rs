use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{pseudo_cost, CostMode, PolicyModel, TrainerError};
use crate::envs::{Environment, Step, Trajectory};
use crate::numerics::{Rng, Tensor};
use crate::safety::{CbModel, SsvModel, SummaryVector};

/// Frozen per-step cost signal for one rollout.
#[derive(Clone, Copy)]
pub enum CostSource<'a> {
    Ssv(&'a SsvModel),
    Cb(&'a CbModel),
    Oracle,
}

impl CostSource<'_> {
    pub fn mode(&self) -> CostMode {
        match self {
            CostSource::Ssv(_) => CostMode::Ssv,
            CostSource::Cb(_) => CostMode::Cb,
            CostSource::Oracle => CostMode::Oracle,
        }
    }

    /// Width of the summary appended to observations.
    pub fn summary_dim(&self) -> usize {
        match self {
            CostSource::Ssv(m) => m.hidden(),
            _ => 0,
        }
    }

    pub(crate) fn initial_summary(&self) -> Option<SummaryVector> {
        match self {
            CostSource::Ssv(m) => Some(m.initial_state()),
            _ => None,
        }
    }
}

/// Policy input: the observation, followed by `h_t` in ssv mode.
pub(crate) fn augment(obs: &[f64], h: Option<&SummaryVector>) -> Vec<f64> {
    let mut s = obs.to_vec();
    if let Some(h) = h {
        s.extend_from_slice(h.as_slice());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode_id: u64,
    pub len: usize,
    pub reward: f64,
    pub true_cost: f64,
    /// `sum_t gamma^t c_t` of the learner's cost signal.
    pub discounted_cost: f64,
    /// `sum_t log P_t`, ssv mode only.
    pub log_prob_safe: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub mode: CostMode,
    pub states: Tensor,
    /// Pre-clip samples the log-densities refer to.
    pub actions: Tensor,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub dones: Vec<bool>,
    pub values_r: Vec<f64>,
    pub values_c: Vec<f64>,
    pub bootstrap_r: f64,
    pub bootstrap_c: f64,
    /// Completed episodes only.
    pub episodes: Vec<EpisodeStats>,
    pub trajectories: Vec<Trajectory>,
    /// `log(mean(exp(s))) - mean(s)` over completed ssv episodes.
    pub jensen_gap: Option<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Mean discounted episode cost over completed episodes.
    pub fn j_c(&self) -> Option<f64> {
        mean(self.episodes.iter().map(|e| e.discounted_cost))
    }

    pub fn mean_reward(&self) -> Option<f64> {
        mean(self.episodes.iter().map(|e| e.reward))
    }

    pub fn mean_true_cost(&self) -> Option<f64> {
        mean(self.episodes.iter().map(|e| e.true_cost))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `log(mean(exp(s))) - mean(s)`, computed with a max shift. Never negative
/// up to rounding.
pub fn jensen_gap(sums: &[f64]) -> Option<f64> {
    if sums.is_empty() {
        return None;
    }
    let n = sums.len() as f64;
    let m = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lme = m + (sums.iter().map(|s| (s - m).exp()).sum::<f64>() / n).ln();
    let avg = sums.iter().sum::<f64>() / n;
    Some(lme - avg)
}

struct Open {
    traj: Trajectory,
    reward: f64,
    disc_cost: f64,
    discount: f64,
    log_safe: f64,
}

/// Runs `policy` for exactly `n_steps` environment steps, resetting the env
/// (and `h`) at the start and after every terminal step.
pub fn collect_rollout(
    env: &mut dyn Environment,
    policy: &PolicyModel,
    cost: CostSource<'_>,
    n_steps: usize,
    gamma: f64,
    rng: &mut Rng,
    next_episode_id: &mut u64,
) -> Result<RolloutBatch, TrainerError> {
    if n_steps == 0 {
        return Err(TrainerError::Usage("rollout needs at least one step".into()));
    }
    let state_dim = env.obs_dim() + cost.summary_dim();
    if state_dim != policy.state_dim() || env.action_dim() != policy.action_dim() {
        return Err(TrainerError::Shape(format!(
            "policy expects s{}/a{}, env and cost source give s{}/a{}",
            policy.state_dim(),
            policy.action_dim(),
            state_dim,
            env.action_dim()
        )));
    }
    let adim = policy.action_dim();
    let mut states = Vec::with_capacity(n_steps * state_dim);
    let mut actions = Vec::with_capacity(n_steps * adim);
    let mut log_probs = Vec::with_capacity(n_steps);
    let mut rewards = Vec::with_capacity(n_steps);
    let mut costs = Vec::with_capacity(n_steps);
    let mut dones = Vec::with_capacity(n_steps);
    let mut values_r = Vec::with_capacity(n_steps);
    let mut values_c = Vec::with_capacity(n_steps);
    let mut episodes = Vec::new();
    let mut trajectories = Vec::new();

    let start_episode = |env: &mut dyn Environment, rng: &mut Rng, id: &mut u64| {
        let obs = env.reset(rng.gen());
        let ep = Open {
            traj: Trajectory::new(*id),
            reward: 0.0,
            disc_cost: 0.0,
            discount: 1.0,
            log_safe: 0.0,
        };
        *id += 1;
        (obs, ep)
    };
    let (mut obs, mut ep) = start_episode(env, rng, next_episode_id);
    let mut h = cost.initial_summary();

    for t in 0..n_steps {
        let state = augment(&obs, h.as_ref());
        let out = policy.act(&state, rng)?;
        let executed = env.canonical_action(&out.action);
        let r = env
            .step(&executed)
            .map_err(|source| TrainerError::Rollout { steps: t, source })?;
        let c = match cost {
            CostSource::Oracle => r.true_cost,
            CostSource::Cb(m) => m.step_cost(&obs, &executed)?,
            CostSource::Ssv(m) => {
                let cur = h.as_ref().expect("ssv summary");
                let next = m.step(cur, &obs, &executed)?;
                let score = m.point_score(cur, &next)?;
                ep.log_safe += score;
                h = Some(next);
                pseudo_cost(score)?
            }
        };
        states.extend_from_slice(&state);
        actions.extend_from_slice(&out.action);
        log_probs.push(out.log_prob);
        rewards.push(r.reward);
        costs.push(c);
        dones.push(r.done);
        values_r.push(out.value_r);
        values_c.push(out.value_c);
        ep.reward += r.reward;
        ep.disc_cost += ep.discount * c;
        ep.discount *= gamma;
        ep.traj.steps.push(Step {
            obs: std::mem::replace(&mut obs, r.obs),
            action: executed,
            reward: r.reward,
            true_cost: r.true_cost,
        });
        if r.done {
            let is_ssv = matches!(cost, CostSource::Ssv(_));
            let finished = if t + 1 < n_steps {
                let (fresh_obs, fresh) = start_episode(env, rng, next_episode_id);
                obs = fresh_obs;
                h = cost.initial_summary();
                std::mem::replace(&mut ep, fresh)
            } else {
                std::mem::replace(
                    &mut ep,
                    Open {
                        traj: Trajectory::new(0),
                        reward: 0.0,
                        disc_cost: 0.0,
                        discount: 1.0,
                        log_safe: 0.0,
                    },
                )
            };
            episodes.push(EpisodeStats {
                episode_id: finished.traj.episode_id,
                len: finished.traj.len(),
                reward: finished.reward,
                true_cost: finished.traj.total_true_cost(),
                discounted_cost: finished.disc_cost,
                log_prob_safe: is_ssv.then_some(finished.log_safe),
            });
            trajectories.push(finished.traj);
        }
    }
    let (bootstrap_r, bootstrap_c) = if dones.last().copied().unwrap_or(true) {
        (0.0, 0.0)
    } else {
        policy.values(&augment(&obs, h.as_ref()))?
    };
    let jensen = match cost {
        CostSource::Ssv(_) => {
            let sums: Vec<f64> = episodes.iter().filter_map(|e: &EpisodeStats| e.log_prob_safe).collect();
            jensen_gap(&sums)
        }
        _ => None,
    };
    Ok(RolloutBatch {
        mode: cost.mode(),
        states: Tensor::new(n_steps, state_dim, states)?,
        actions: Tensor::new(n_steps, adim, actions)?,
        log_probs,
        rewards,
        costs,
        dones,
        values_r,
        values_c,
        bootstrap_r,
        bootstrap_c,
        episodes,
        trajectories,
        jensen_gap: jensen,
    })
}
