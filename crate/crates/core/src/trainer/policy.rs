use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::numerics::{seeded_rng, Checkpoint, Graph, Mlp, ParamId, ParamStore, Reduce, Rng, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub init_log_std: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            state_dim: 1,
            action_dim: 1,
            hidden: 64,
            init_log_std: -0.5,
            seed: 0,
        }
    }
}

/// Gaussian policy with a state-independent log-std, plus reward and cost
/// critics. Policy and critics live in separate stores so that they can use
/// separate optimizers.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: PolicyConfig,
    pub(crate) policy_store: ParamStore,
    pub(crate) critic_store: ParamStore,
    mean_net: Mlp,
    log_std: ParamId,
    reward_critic: Mlp,
    cost_critic: Mlp,
}

/// Forward values for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    /// Pre-clip sample.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value_r: f64,
    pub value_c: f64,
}

impl PolicyModel {
    pub const KIND: &'static str = "policy";

    pub fn new(config: PolicyConfig) -> Result<Self, TrainerError> {
        if config.state_dim == 0 || config.action_dim == 0 || config.hidden == 0 {
            return Err(TrainerError::Config("policy dims must be positive".into()));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&config.init_log_std) {
            return Err(TrainerError::Config("init_log_std outside [-5, 2]".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let (s, a, h) = (config.state_dim, config.action_dim, config.hidden);
        let mut policy_store = ParamStore::new();
        let mean_net = Mlp::new(&mut policy_store, "pi.mean", &[s, h, h, a], 0.01, &mut rng);
        let log_std = policy_store.add("pi.log_std", Tensor::filled(1, a, config.init_log_std));
        let mut critic_store = ParamStore::new();
        let reward_critic = Mlp::new(&mut critic_store, "v.reward", &[s, h, h, 1], 1.0, &mut rng);
        let cost_critic = Mlp::new(&mut critic_store, "v.cost", &[s, h, h, 1], 1.0, &mut rng);
        Ok(Self {
            config,
            policy_store,
            critic_store,
            mean_net,
            log_std,
            reward_critic,
            cost_critic,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    /// Effective log-std after bounding.
    pub fn log_std(&self) -> Vec<f64> {
        self.policy_store
            .get(self.log_std)
            .data()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    fn check_state(&self, state: &[f64]) -> Result<(), TrainerError> {
        if state.len() != self.config.state_dim {
            return Err(TrainerError::Shape(format!(
                "policy expects state dim {}, got {}",
                self.config.state_dim,
                state.len()
            )));
        }
        Ok(())
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>, TrainerError> {
        self.check_state(state)?;
        Ok(self
            .mean_net
            .apply(&self.policy_store, &Tensor::row(state))?
            .into_data())
    }

    pub fn values(&self, state: &[f64]) -> Result<(f64, f64), TrainerError> {
        self.check_state(state)?;
        let x = Tensor::row(state);
        let vr = self.reward_critic.apply(&self.critic_store, &x)?.item();
        let vc = self.cost_critic.apply(&self.critic_store, &x)?.item();
        Ok((vr, vc))
    }

    /// Log-density of `action` under the policy at `state`.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64, TrainerError> {
        let mean = self.mean_action(state)?;
        if action.len() != mean.len() {
            return Err(TrainerError::Shape("action dim mismatch".into()));
        }
        Ok(gaussian_log_prob(&mean, &self.log_std(), action))
    }

    /// Samples an action and records its log-density and both values.
    pub fn act(&self, state: &[f64], rng: &mut Rng) -> Result<ActOutput, TrainerError> {
        let mean = self.mean_action(state)?;
        let ls = self.log_std();
        let action: Vec<f64> = mean
            .iter()
            .zip(&ls)
            .map(|(m, l)| {
                let e: f64 = StandardNormal.sample(&mut *rng);
                m + l.exp() * e
            })
            .collect();
        let log_prob = gaussian_log_prob(&mean, &ls, &action);
        let (value_r, value_c) = self.values(state)?;
        Ok(ActOutput {
            action,
            log_prob,
            value_r,
            value_c,
        })
    }

    /// `B x 1` log-densities of a batch, recorded on `g`.
    pub(crate) fn batch_log_prob(&self, g: &mut Graph, states: Var, actions: &Tensor) -> Result<Var, TrainerError> {
        let mean = self.mean_net.forward(g, &self.policy_store, states)?;
        let ls = g.param(&self.policy_store, self.log_std);
        let ls = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)?;
        let a = g.constant(actions.clone());
        let diff = g.sub(a, mean)?;
        let neg_ls = g.neg(ls)?;
        let inv_std = g.exp(neg_ls)?;
        let z = g.mul(diff, inv_std)?;
        let z2 = g.square(z)?;
        let quad = g.sum(z2, Reduce::PerRow)?;
        let quad = g.scale(quad, -0.5)?;
        let ls_sum = g.sum(ls, Reduce::All)?;
        let lp = g.sub(quad, ls_sum)?;
        let c = g.scalar(-HALF_LN_2PI * self.config.action_dim as f64);
        Ok(g.add(lp, c)?)
    }

    /// Sum of per-dimension entropies, recorded on `g`.
    pub(crate) fn entropy(&self, g: &mut Graph) -> Result<Var, TrainerError> {
        let ls = g.param(&self.policy_store, self.log_std);
        let ls = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)?;
        let s = g.sum(ls, Reduce::All)?;
        let c = g.scalar((0.5 + HALF_LN_2PI) * self.config.action_dim as f64);
        Ok(g.add(s, c)?)
    }

    pub(crate) fn batch_values(&self, g: &mut Graph, states: Var) -> Result<(Var, Var), TrainerError> {
        let vr = self.reward_critic.forward(g, &self.critic_store, states)?;
        let vc = self.cost_critic.forward(g, &self.critic_store, states)?;
        Ok((vr, vc))
    }

    pub fn to_checkpoints(&self) -> (Checkpoint, Checkpoint) {
        let cfg = serde_json::to_string(&self.config).unwrap_or_default();
        (
            Checkpoint::new(Self::KIND, self.policy_store.clone()).with_meta("config", &cfg),
            Checkpoint::new("critics", self.critic_store.clone()).with_meta("config", &cfg),
        )
    }

    pub fn from_checkpoints(policy: &Checkpoint, critics: &Checkpoint) -> Result<Self, TrainerError> {
        policy.expect_kind(Self::KIND)?;
        critics.expect_kind("critics")?;
        let config: PolicyConfig = serde_json::from_str(policy.meta("config")?)
            .map_err(|e| TrainerError::Config(format!("policy config in checkpoint: {e}")))?;
        let mut m = Self::new(config)?;
        m.policy_store.copy_from(&policy.params)?;
        m.critic_store.copy_from(&critics.params)?;
        Ok(m)
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let z = (a - m) * (-l).exp();
            -0.5 * z * z - l - HALF_LN_2PI
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_log_prob_matches_closed_form() {
        let p = PolicyModel::new(PolicyConfig {
            state_dim: 3,
            action_dim: 2,
            hidden: 8,
            ..PolicyConfig::default()
        })
        .unwrap();
        let states = Tensor::from_rows(&[vec![0.1, -0.2, 0.3], vec![1.0, 0.0, -1.0]]).unwrap();
        let actions = Tensor::from_rows(&[vec![0.5, -0.5], vec![2.0, 0.1]]).unwrap();
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let lp = p.batch_log_prob(&mut g, s, &actions).unwrap();
        for i in 0..2 {
            let direct = p.log_prob(states.row_slice(i), actions.row_slice(i)).unwrap();
            assert!((g.value(lp).get(i, 0) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_density() {
        let lp = gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
        assert!((lp + HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn log_std_is_bounded() {
        let mut p = PolicyModel::new(PolicyConfig::default()).unwrap();
        let id = p.log_std;
        p.policy_store.get_mut(id).data_mut()[0] = 9.0;
        assert_eq!(p.log_std(), vec![LOG_STD_MAX]);
        assert!(PolicyModel::new(PolicyConfig {
            init_log_std: -7.0,
            ..PolicyConfig::default()
        })
        .is_err());
    }
}
