//! Small discrete chain used for exhaustive-enumeration checks.
//!
//! States `0..n`, agent starts at 0. The scalar action in `[-1, 1]` is read as
//! left (`< -1/3`), stay, or right (`> 1/3`). Reward and cost are charged for
//! the state entered by the move.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvGeometry, Environment, StepResult};
use crate::numerics::{seeded_rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    pub states: usize,
    pub costly_states: Vec<usize>,
    /// Per-state reward; empty means a tent peaking at `reward_peak`.
    pub rewards: Vec<f64>,
    pub reward_peak: usize,
    /// Probability a move fails and the agent stays put.
    pub slip: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            states: 10,
            costly_states: vec![7],
            rewards: Vec::new(),
            reward_peak: 7,
            slip: 0.0,
        }
    }
}

impl ChainParams {
    pub fn reward(&self, s: usize) -> f64 {
        if let Some(r) = self.rewards.get(s) {
            return *r;
        }
        let span = (self.states.max(2) - 1) as f64;
        1.0 - (s as f64 - self.reward_peak as f64).abs() / span
    }

    pub fn cost(&self, s: usize) -> f64 {
        if self.costly_states.contains(&s) {
            1.0
        } else {
            0.0
        }
    }

    /// Discrete move encoded by a continuous action.
    pub fn decode(action: f64) -> i64 {
        if action < -1.0 / 3.0 {
            -1
        } else if action > 1.0 / 3.0 {
            1
        } else {
            0
        }
    }

    /// Canonical continuous action for a discrete move.
    pub fn encode(mv: i64) -> f64 {
        mv.clamp(-1, 1) as f64
    }

    pub fn next_state(&self, s: usize, mv: i64) -> usize {
        (s as i64 + mv).clamp(0, self.states as i64 - 1) as usize
    }

    pub fn observe(&self, s: usize, t: usize, horizon: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.states + 1];
        obs[s] = 1.0;
        obs[self.states] = t as f64 / horizon as f64;
        obs
    }
}

pub struct ChainMdp {
    params: ChainParams,
    horizon: usize,
    state: usize,
    t: usize,
    started: bool,
    done: bool,
    rng: Rng,
}

impl ChainMdp {
    pub const ACTION_DIM: usize = 1;

    pub fn new(params: ChainParams, horizon: usize, seed: u64) -> Result<Self, EnvError> {
        if params.states < 2 {
            return Err(EnvError::Config("chain needs at least 2 states".into()));
        }
        if let Some(&s) = params.costly_states.iter().find(|&&s| s >= params.states) {
            return Err(EnvError::Config(format!("costly state {s} out of range")));
        }
        if !(0.0..=1.0).contains(&params.slip) {
            return Err(EnvError::Config("slip must be a probability".into()));
        }
        Ok(Self {
            params,
            horizon,
            state: 0,
            t: 0,
            started: false,
            done: false,
            rng: seeded_rng(seed),
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for ChainMdp {
    fn obs_dim(&self) -> usize {
        self.params.states + 1
    }

    fn action_dim(&self) -> usize {
        Self::ACTION_DIM
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = seeded_rng(seed);
        self.state = 0;
        self.t = 0;
        self.started = true;
        self.done = false;
        self.params.observe(0, 0, self.horizon)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::Usage("step before reset".into()));
        }
        if self.done {
            return Err(EnvError::Usage("step after episode end".into()));
        }
        let a = *action
            .first()
            .ok_or_else(|| EnvError::Usage("empty action".into()))?;
        let mut mv = ChainParams::decode(a.clamp(-1.0, 1.0));
        if self.params.slip > 0.0 && self.rng.gen::<f64>() < self.params.slip {
            mv = 0;
        }
        self.state = self.params.next_state(self.state, mv);
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            obs: self.params.observe(self.state, self.t, self.horizon),
            reward: self.params.reward(self.state),
            true_cost: self.params.cost(self.state),
            done: self.done,
            step_index: self.t - 1,
        })
    }

    fn geometry(&self) -> EnvGeometry {
        EnvGeometry::Chain {
            states: self.params.states,
        }
    }

    fn canonical_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .map(|&a| ChainParams::encode(ChainParams::decode(a.clamp(-1.0, 1.0))))
            .collect()
    }
}
