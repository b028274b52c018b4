//! Point mass circling the origin, rewarded for tangential speed near the
//! target circle and charged one unit of cost per step inside a hazard disc.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvGeometry, Environment, StepResult};
use crate::numerics::{seeded_rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HazardPointParams {
    pub circle_radius: f64,
    pub hazards: Vec<Hazard>,
    /// Velocity retained per step.
    pub damping: f64,
    /// Velocity change per unit action.
    pub accel: f64,
    /// Positions are kept inside `[-arena, arena]^2`.
    pub arena: f64,
    pub start_noise: f64,
}

impl Default for HazardPointParams {
    fn default() -> Self {
        Self {
            circle_radius: 1.0,
            hazards: vec![
                Hazard {
                    x: 1.0,
                    y: 0.0,
                    radius: 0.35,
                },
                Hazard {
                    x: -1.0,
                    y: 0.0,
                    radius: 0.35,
                },
            ],
            damping: 0.8,
            accel: 0.03,
            arena: 2.0,
            start_noise: 0.05,
        }
    }
}

impl HazardPointParams {
    /// Terminal speed per axis under full throttle.
    pub fn speed_scale(&self) -> f64 {
        self.accel / (1.0 - self.damping)
    }

    pub fn in_hazard(&self, x: f64, y: f64) -> bool {
        self.hazards
            .iter()
            .any(|h| (x - h.x).powi(2) + (y - h.y).powi(2) <= h.radius * h.radius)
    }
}

pub struct HazardPoint {
    params: HazardPointParams,
    horizon: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
    started: bool,
    done: bool,
    rng: Rng,
}

impl HazardPoint {
    pub const OBS_DIM: usize = 5;
    pub const ACTION_DIM: usize = 2;

    pub fn new(params: HazardPointParams, horizon: usize, seed: u64) -> Self {
        Self {
            params,
            horizon,
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            t: 0,
            started: false,
            done: false,
            rng: seeded_rng(seed),
        }
    }

    pub fn params(&self) -> &HazardPointParams {
        &self.params
    }

    fn observe(&self) -> Vec<f64> {
        let s = self.params.speed_scale();
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0] / s,
            self.vel[1] / s,
            self.t as f64 / self.horizon as f64,
        ]
    }

    #[cfg(test)]
    fn place(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }
}

impl Environment for HazardPoint {
    fn obs_dim(&self) -> usize {
        Self::OBS_DIM
    }

    fn action_dim(&self) -> usize {
        Self::ACTION_DIM
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = seeded_rng(seed);
        let noise = Normal::new(0.0, self.params.start_noise.max(1e-12)).expect("finite std");
        let angle = std::f64::consts::FRAC_PI_2 + noise.sample(&mut self.rng);
        let r = self.params.circle_radius + noise.sample(&mut self.rng);
        self.pos = [r * angle.cos(), r * angle.sin()];
        self.vel = [0.0, 0.0];
        self.t = 0;
        self.started = true;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::Usage("step before reset".into()));
        }
        if self.done {
            return Err(EnvError::Usage("step after episode end".into()));
        }
        if action.len() != Self::ACTION_DIM {
            return Err(EnvError::Usage(format!(
                "expected {} action dims, got {}",
                Self::ACTION_DIM,
                action.len()
            )));
        }
        let p = &self.params;
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            self.vel[i] = p.damping * self.vel[i] + p.accel * a;
            self.pos[i] += self.vel[i];
            if self.pos[i].abs() > p.arena {
                self.pos[i] = self.pos[i].clamp(-p.arena, p.arena);
                self.vel[i] = 0.0;
            }
        }
        let [x, y] = self.pos;
        let radius = (x * x + y * y).sqrt().max(1e-9);
        let tangential = (x * self.vel[1] - y * self.vel[0]) / radius;
        let reward = tangential / (1.0 + (radius - p.circle_radius).abs());
        let true_cost = if p.in_hazard(x, y) { 1.0 } else { 0.0 };
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            true_cost,
            done: self.done,
            step_index: self.t - 1,
        })
    }

    fn geometry(&self) -> EnvGeometry {
        EnvGeometry::HazardPoint {
            circle_radius: self.params.circle_radius,
            arena: self.params.arena,
            hazards: self.params.hazards.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> HazardPoint {
        HazardPoint::new(HazardPointParams::default(), 200, 0)
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset(0), b.reset(0));
        assert_ne!(a.reset(0), a.reset(1));
    }

    #[test]
    fn cost_inside_and_outside_hazard() {
        let mut e = env();
        e.reset(0);
        e.place([1.0, 0.0], [0.0, 0.0]);
        assert_eq!(e.step(&[0.0, 0.0]).unwrap().true_cost, 1.0);
        e.place([0.0, 1.0], [0.0, 0.0]);
        assert_eq!(e.step(&[0.0, 0.0]).unwrap().true_cost, 0.0);
    }

    #[test]
    fn done_at_horizon_and_step_after_done_fails() {
        let mut e = env();
        e.reset(3);
        for t in 0..200 {
            let r = e.step(&[0.3, -0.2]).unwrap();
            assert_eq!(r.done, t == 199);
            assert_eq!(r.step_index, t);
        }
        assert!(matches!(e.step(&[0.0, 0.0]), Err(EnvError::Usage(_))));
    }

    #[test]
    fn actions_are_clipped() {
        let mut a = env();
        let mut b = env();
        a.reset(5);
        b.reset(5);
        assert_eq!(a.step(&[7.0, -3.0]).unwrap(), b.step(&[1.0, -1.0]).unwrap());
    }

    #[test]
    fn circling_counterclockwise_earns_positive_reward() {
        let mut e = env();
        e.reset(0);
        let mut total = 0.0;
        for _ in 0..200 {
            let [x, y] = e.pos;
            let r = (x * x + y * y).sqrt();
            // tangent plus radial correction
            let a = [-y / r + (1.0 - r) * x, x / r + (1.0 - r) * y];
            total += e.step(&a).unwrap().reward;
        }
        assert!(total > 20.0, "total reward {total}");
    }
}
