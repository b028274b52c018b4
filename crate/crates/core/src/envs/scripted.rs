//! Scripted behaviour policies for building offline labeled datasets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{ChainParams, EnvError, Environment, HazardPointParams, Step, Trajectory};
use crate::numerics::Rng;

pub trait BehaviourPolicy {
    fn act(&mut self, obs: &[f64], t: usize, rng: &mut Rng) -> Vec<f64>;
}

/// Rolls one full episode of `policy` in `env`.
pub fn run_episode(
    env: &mut dyn Environment,
    policy: &mut dyn BehaviourPolicy,
    seed: u64,
    episode_id: u64,
    rng: &mut Rng,
) -> Result<Trajectory, EnvError> {
    let mut obs = env.reset(seed);
    let mut traj = Trajectory::new(episode_id);
    for t in 0..env.horizon() {
        let action = env.canonical_action(&policy.act(&obs, t, rng));
        let r = env.step(&action)?;
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
    Ok(traj)
}

/// Steers towards a target radius at a fixed fraction of top speed, switching
/// to a second radius at `switch_at`.
#[derive(Clone, Debug)]
pub struct CirclingPolicy {
    pub params: HazardPointParams,
    pub radii: (f64, f64),
    pub switch_at: usize,
    pub speed: f64,
    pub noise: f64,
}

impl CirclingPolicy {
    /// Random radius pair, speed and noise level.
    pub fn sample(params: &HazardPointParams, horizon: usize, rng: &mut Rng) -> Self {
        let r = |rng: &mut Rng| rng.gen_range(0.5..1.6);
        Self {
            params: params.clone(),
            radii: (r(rng), r(rng)),
            switch_at: rng.gen_range(0..=horizon),
            speed: rng.gen_range(0.4..1.0),
            noise: rng.gen_range(0.0..0.4),
        }
    }
}

impl BehaviourPolicy for CirclingPolicy {
    fn act(&mut self, obs: &[f64], t: usize, rng: &mut Rng) -> Vec<f64> {
        let p = &self.params;
        let (x, y) = (obs[0], obs[1]);
        let s = p.speed_scale();
        let (vx, vy) = (obs[2] * s, obs[3] * s);
        let r = (x * x + y * y).sqrt().max(1e-6);
        let target = if t < self.switch_at { self.radii.0 } else { self.radii.1 };
        let (tx, ty) = (-y / r, x / r);
        let (rx, ry) = (x / r, y / r);
        let radial = 2.0 * (target - r) * s;
        let want = [
            self.speed * s * tx + radial * rx,
            self.speed * s * ty + radial * ry,
        ];
        let noise = Normal::new(0.0, self.noise.max(1e-9)).expect("finite std");
        let vel = [vx, vy];
        (0..2)
            .map(|i| {
                let a = (want[i] - p.damping * vel[i]) / p.accel;
                (a + noise.sample(rng)).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// Walks towards a sequence of target states, taking a random move with
/// probability `epsilon`.
#[derive(Clone, Debug)]
pub struct ChainTargetPolicy {
    pub params: ChainParams,
    /// `(target, until_step)` pairs; the last target holds to the end.
    pub schedule: Vec<(usize, usize)>,
    pub epsilon: f64,
}

impl ChainTargetPolicy {
    pub fn sample(params: &ChainParams, horizon: usize, rng: &mut Rng) -> Self {
        let n = params.states;
        let legs = rng.gen_range(1..=3);
        let mut cuts: Vec<usize> = (0..legs - 1).map(|_| rng.gen_range(0..=horizon)).collect();
        cuts.sort_unstable();
        cuts.push(horizon);
        // favour costly targets so that both labels show up
        let costly = &params.costly_states;
        let schedule = cuts
            .into_iter()
            .map(|c| {
                let g = if !costly.is_empty() && rng.gen::<f64>() < 0.4 {
                    costly[rng.gen_range(0..costly.len())]
                } else {
                    rng.gen_range(0..n)
                };
                (g, c)
            })
            .collect();
        Self {
            params: params.clone(),
            schedule,
            epsilon: rng.gen_range(0.0..0.5),
        }
    }
}

impl BehaviourPolicy for ChainTargetPolicy {
    fn act(&mut self, obs: &[f64], t: usize, rng: &mut Rng) -> Vec<f64> {
        let n = self.params.states;
        let state = obs[..n].iter().position(|&v| v > 0.5).unwrap_or(0);
        let target = self
            .schedule
            .iter()
            .find(|(_, until)| t < *until)
            .or(self.schedule.last())
            .map(|(g, _)| *g)
            .unwrap_or(0);
        let mv = if rng.gen::<f64>() < self.epsilon {
            rng.gen_range(-1..=1)
        } else {
            (target as i64 - state as i64).signum()
        };
        vec![ChainParams::encode(mv)]
    }
}

pub struct UniformPolicy {
    pub dims: usize,
}

impl BehaviourPolicy for UniformPolicy {
    fn act(&mut self, _obs: &[f64], _t: usize, rng: &mut Rng) -> Vec<f64> {
        (0..self.dims).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}
