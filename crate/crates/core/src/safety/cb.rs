//! Cost-and-budget baseline: a per-step cost network and a scalar budget
//! estimate, with `P(safe) = sigmoid(b - sum_t c(s_t, a_t))`.

use serde::{Deserialize, Serialize};

use super::{SafetyError, SafetyModel};
use crate::envs::Trajectory;
use crate::numerics::{seeded_rng, softplus, Checkpoint, Graph, Mlp, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    /// Pass the cost head through softplus so that costs are non-negative.
    pub nonneg_cost: bool,
    pub init_budget: f64,
    /// Per-step cost of the untrained network.
    pub init_step_cost: f64,
    pub seed: u64,
}

impl Default for CbConfig {
    fn default() -> Self {
        Self {
            obs_dim: 1,
            action_dim: 1,
            hidden: 64,
            nonneg_cost: true,
            init_budget: 25.0,
            init_step_cost: 0.1,
            seed: 0,
        }
    }
}

impl CbConfig {
    /// Budget estimate starts at one eighth of the horizon.
    pub fn new(obs_dim: usize, action_dim: usize, horizon: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            init_budget: horizon as f64 / 8.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CbModel {
    config: CbConfig,
    store: ParamStore,
    cost_net: Mlp,
    budget: ParamId,
}

impl CbModel {
    pub const KIND: &'static str = "cb";

    pub fn new(config: CbConfig) -> Result<Self, SafetyError> {
        if config.obs_dim == 0 || config.action_dim == 0 || config.hidden == 0 {
            return Err(SafetyError::Config("cb dims must be positive".into()));
        }
        if config.nonneg_cost && !(config.init_step_cost > 0.0) {
            return Err(SafetyError::Config("init_step_cost must be positive".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let sizes = [config.obs_dim + config.action_dim, config.hidden, config.hidden, 1];
        let cost_net = Mlp::new(&mut store, "cost", &sizes, 0.1, &mut rng);
        let bias = cost_net.layers.last().expect("non-empty mlp").bias;
        let c0 = config.init_step_cost;
        store.get_mut(bias).data_mut()[0] = if config.nonneg_cost {
            c0.exp_m1().ln()
        } else {
            c0
        };
        let budget = store.add("budget", Tensor::scalar(config.init_budget));
        Ok(Self {
            config,
            store,
            cost_net,
            budget,
        })
    }

    pub fn config(&self) -> &CbConfig {
        &self.config
    }

    pub fn estimated_budget(&self) -> f64 {
        self.store.get(self.budget).item()
    }

    pub fn budget_param(&self) -> ParamId {
        self.budget
    }

    /// Bias of the cost head's output layer.
    pub fn cost_bias_param(&self) -> ParamId {
        self.cost_net.layers.last().expect("non-empty mlp").bias
    }

    fn inputs(&self, trajs: &[&Trajectory]) -> Result<(Tensor, Tensor), SafetyError> {
        let d = self.config.obs_dim + self.config.action_dim;
        let total: usize = trajs.iter().map(|t| t.len()).sum();
        let mut x = Vec::with_capacity(total * d);
        let mut seg = vec![0.0; trajs.len() * total];
        let mut row = 0;
        for (b, t) in trajs.iter().enumerate() {
            if t.is_empty() {
                return Err(SafetyError::Usage("empty trajectory".into()));
            }
            for s in &t.steps {
                if s.obs.len() != self.config.obs_dim || s.action.len() != self.config.action_dim {
                    return Err(SafetyError::Shape("cb input dims mismatch".into()));
                }
                x.extend_from_slice(&s.obs);
                x.extend_from_slice(&s.action);
                seg[b * total + row] = 1.0;
                row += 1;
            }
        }
        Ok((Tensor::new(total, d, x)?, Tensor::new(trajs.len(), total, seg)?))
    }

    /// Estimated per-step costs of a segment.
    pub fn step_costs(&self, traj: &Trajectory) -> Result<Vec<f64>, SafetyError> {
        let (x, _) = self.inputs(&[traj])?;
        let out = self.cost_net.apply(&self.store, &x)?;
        Ok(out
            .data()
            .iter()
            .map(|&z| if self.config.nonneg_cost { softplus(z) } else { z })
            .collect())
    }

    /// Cost of a single `(s, a)` pair.
    pub fn step_cost(&self, obs: &[f64], action: &[f64]) -> Result<f64, SafetyError> {
        let x: Vec<f64> = obs.iter().chain(action).copied().collect();
        if x.len() != self.config.obs_dim + self.config.action_dim {
            return Err(SafetyError::Shape("cb input dims mismatch".into()));
        }
        let z = self.cost_net.apply(&self.store, &Tensor::row(&x))?.item();
        Ok(if self.config.nonneg_cost { softplus(z) } else { z })
    }

    /// `P(safe | tau) = sigmoid(b - sum c)`.
    pub fn cb_prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError> {
        Ok(self.log_prob_safe(traj)?.exp())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(Self::KIND, self.store.clone())
            .with_meta("config", serde_json::to_string(&self.config).unwrap_or_default())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SafetyError> {
        ck.expect_kind(Self::KIND)?;
        let config: CbConfig = serde_json::from_str(ck.meta("config")?)
            .map_err(|e| SafetyError::Config(format!("cb config in checkpoint: {e}")))?;
        let mut model = Self::new(config)?;
        model.store.copy_from(&ck.params)?;
        Ok(model)
    }
}

/// `log sigmoid(m) = -softplus(-m)`.
fn log_sigmoid(m: f64) -> f64 {
    -softplus(-m)
}

impl SafetyModel for CbModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_log_prob(&self, g: &mut Graph, batch: &[&Trajectory], _rng: &mut Rng) -> Result<Var, SafetyError> {
        if batch.is_empty() {
            return Err(SafetyError::Usage("empty batch".into()));
        }
        let (x, seg) = self.inputs(batch)?;
        let xv = g.constant(x);
        let z = self.cost_net.forward(g, &self.store, xv)?;
        let c = if self.config.nonneg_cost { g.softplus(z)? } else { z };
        let segv = g.constant(seg);
        let total = g.matmul(segv, c)?;
        let b = g.param(&self.store, self.budget);
        // log sigmoid(b - C) = -softplus(C - b)
        let d = g.sub(total, b)?;
        let sp = g.softplus(d)?;
        Ok(g.neg(sp)?)
    }

    fn log_prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError> {
        let total: f64 = self.step_costs(traj)?.iter().sum();
        Ok(log_sigmoid(self.estimated_budget() - total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Step;

    fn traj(len: usize) -> Trajectory {
        Trajectory {
            episode_id: 0,
            start: 0,
            steps: (0..len)
                .map(|i| Step {
                    obs: vec![i as f64 / len as f64, 1.0],
                    action: vec![0.3],
                    reward: 0.0,
                    true_cost: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn initial_budget_is_eighth_of_horizon() {
        let m = CbModel::new(CbConfig::new(2, 1, 200)).unwrap();
        assert_eq!(m.estimated_budget(), 25.0);
        let c = m.step_costs(&traj(5)).unwrap();
        assert!(c.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn graph_matches_value_path() {
        let m = CbModel::new(CbConfig::new(2, 1, 40)).unwrap();
        let ts = [traj(3), traj(9)];
        let refs: Vec<&Trajectory> = ts.iter().collect();
        let mut g = Graph::new();
        let mut rng = seeded_rng(0);
        let lp = m.batch_log_prob(&mut g, &refs, &mut rng).unwrap();
        for (i, t) in ts.iter().enumerate() {
            assert!((g.value(lp).get(i, 0) - m.log_prob_safe(t).unwrap()).abs() < 1e-12);
        }
        let p = m.cb_prob_safe(&ts[0]).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}
