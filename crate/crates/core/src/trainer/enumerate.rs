//! Exhaustive evaluation on the chain, used as an oracle for rollout
//! estimates and for the constrained optimum.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::rollout::augment;
use super::{pseudo_cost, CostSource, PolicyModel, TrainerError};
use crate::envs::ChainParams;
use crate::safety::SummaryVector;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactEvaluation {
    pub expected_reward: f64,
    pub expected_true_cost: f64,
    pub prob_safe: f64,
    /// `E[sum_t gamma^t c_t]` of the cost source's signal.
    pub j_c: f64,
    pub paths: usize,
    /// Total probability mass visited; 1 up to rounding.
    pub mass: f64,
}

struct Walker<'a> {
    params: &'a ChainParams,
    horizon: usize,
    gamma: f64,
    budget: f64,
    policy: &'a PolicyModel,
    cost: CostSource<'a>,
    std_normal: Normal,
    out: ExactEvaluation,
}

struct Node {
    state: usize,
    t: usize,
    h: Option<SummaryVector>,
    prob: f64,
    reward: f64,
    true_cost: f64,
    signal: f64,
    discount: f64,
}

impl Walker<'_> {
    fn move_probs(&self, mean: f64, std: f64) -> [f64; 3] {
        let lo = self.std_normal.cdf((-1.0 / 3.0 - mean) / std);
        let hi = 1.0 - self.std_normal.cdf((1.0 / 3.0 - mean) / std);
        [lo, (1.0 - lo - hi).max(0.0), hi]
    }

    fn visit(&mut self, node: Node) -> Result<(), TrainerError> {
        if node.t == self.horizon {
            self.out.paths += 1;
            self.out.mass += node.prob;
            self.out.expected_reward += node.prob * node.reward;
            self.out.expected_true_cost += node.prob * node.true_cost;
            self.out.j_c += node.prob * node.signal;
            if node.true_cost <= self.budget {
                self.out.prob_safe += node.prob;
            }
            return Ok(());
        }
        let obs = self.params.observe(node.state, node.t, self.horizon);
        let st = augment(&obs, node.h.as_ref());
        let mean = self.policy.mean_action(&st)?[0];
        let std = self.policy.log_std()[0].exp();
        let probs = self.move_probs(mean, std);
        for (k, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let mv = k as i64 - 1;
            let action = [ChainParams::encode(mv)];
            let (h_next, sig) = match self.cost {
                CostSource::Ssv(m) => {
                    let cur = node.h.as_ref().expect("ssv summary");
                    let next = m.step(cur, &obs, &action)?;
                    let c = pseudo_cost(m.point_score(cur, &next)?)?;
                    (Some(next), Some(c))
                }
                CostSource::Cb(m) => (None, Some(m.step_cost(&obs, &action)?)),
                CostSource::Oracle => (None, None),
            };
            let slip = self.params.slip;
            let outcomes: &[(i64, f64)] = if slip > 0.0 && mv != 0 {
                &[(mv, 1.0 - slip), (0, slip)]
            } else {
                &[(mv, 1.0)]
            };
            for &(real, q) in outcomes {
                let s2 = self.params.next_state(node.state, real);
                let c = self.params.cost(s2);
                let signal = sig.unwrap_or(c);
                self.visit(Node {
                    state: s2,
                    t: node.t + 1,
                    h: h_next.clone(),
                    prob: node.prob * p * q,
                    reward: node.reward + self.params.reward(s2),
                    true_cost: node.true_cost + c,
                    signal: node.signal + node.discount * signal,
                    discount: node.discount * self.gamma,
                })?;
            }
        }
        Ok(())
    }
}

/// Expected metrics of `policy` on the chain by enumerating every move
/// sequence. Cost grows as `3^horizon`; intended for horizons up to ~12.
pub fn exact_chain_evaluation(
    params: &ChainParams,
    horizon: usize,
    gamma: f64,
    budget: f64,
    policy: &PolicyModel,
    cost: CostSource<'_>,
) -> Result<ExactEvaluation, TrainerError> {
    if horizon > 14 {
        return Err(TrainerError::Usage(format!("horizon {horizon} too long to enumerate")));
    }
    if policy.action_dim() != 1 || policy.state_dim() != params.states + 1 + cost.summary_dim() {
        return Err(TrainerError::Shape("policy does not match the chain".into()));
    }
    let mut w = Walker {
        params,
        horizon,
        gamma,
        budget,
        policy,
        cost,
        std_normal: Normal::new(0.0, 1.0).expect("standard normal"),
        out: ExactEvaluation::default(),
    };
    w.visit(Node {
        state: 0,
        t: 0,
        h: cost.initial_summary(),
        prob: 1.0,
        reward: 0.0,
        true_cost: 0.0,
        signal: 0.0,
        discount: 1.0,
    })?;
    Ok(w.out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOptimum {
    pub reward: f64,
    pub cost: f64,
    pub moves: Vec<i64>,
}

/// Best deterministic move sequence whose total cost stays within `budget`,
/// by dynamic programming over `(t, state, cost so far)`.
pub fn chain_constrained_optimum(params: &ChainParams, horizon: usize, budget: f64) -> Result<ChainOptimum, TrainerError> {
    if params.slip != 0.0 {
        return Err(TrainerError::Usage("constrained optimum assumes a deterministic chain".into()));
    }
    let n = params.states;
    let cap = if budget.is_finite() { budget.floor().max(0.0) as usize } else { horizon };
    let cap = cap.min(horizon);
    let idx = |s: usize, c: usize| s * (cap + 1) + c;
    // value[t][(s, c)]: best reward-to-go from step t in state s with cost c spent
    let mut value = vec![vec![f64::NEG_INFINITY; n * (cap + 1)]; horizon + 1];
    value[horizon].iter_mut().for_each(|v| *v = 0.0);
    for t in (0..horizon).rev() {
        for s in 0..n {
            for c in 0..=cap {
                let mut best = f64::NEG_INFINITY;
                for mv in -1..=1 {
                    let s2 = params.next_state(s, mv);
                    let c2 = c + params.cost(s2) as usize;
                    if c2 > cap {
                        continue;
                    }
                    best = best.max(params.reward(s2) + value[t + 1][idx(s2, c2)]);
                }
                value[t][idx(s, c)] = best;
            }
        }
    }
    let reward = value[0][idx(0, 0)];
    if !reward.is_finite() {
        return Err(TrainerError::Usage("no feasible move sequence".into()));
    }
    let (mut s, mut c) = (0usize, 0usize);
    let mut moves = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let target = value[t][idx(s, c)];
        let mut chosen = None;
        for mv in -1..=1 {
            let s2 = params.next_state(s, mv);
            let c2 = c + params.cost(s2) as usize;
            if c2 <= cap && (params.reward(s2) + value[t + 1][idx(s2, c2)] - target).abs() < 1e-9 {
                let better = chosen.map_or(true, |(_, _, cc)| c2 < cc);
                if better {
                    chosen = Some((mv, s2, c2));
                }
            }
        }
        let (mv, s2, c2) = chosen.expect("argmax exists");
        moves.push(mv);
        s = s2;
        c = c2;
    }
    Ok(ChainOptimum {
        reward,
        cost: c as f64,
        moves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PolicyConfig;

    #[test]
    fn optimum_respects_budget() {
        let p = ChainParams::default();
        let free = chain_constrained_optimum(&p, 12, f64::INFINITY).unwrap();
        let tight = chain_constrained_optimum(&p, 12, 2.0).unwrap();
        assert!(tight.cost <= 2.0);
        assert!(free.reward >= tight.reward);
        assert!(free.cost > 2.0);
    }

    #[test]
    fn enumeration_mass_sums_to_one() {
        let p = ChainParams::default();
        let pol = PolicyModel::new(PolicyConfig {
            state_dim: p.states + 1,
            action_dim: 1,
            hidden: 8,
            init_log_std: 0.0,
            seed: 3,
        })
        .unwrap();
        let e = exact_chain_evaluation(&p, 6, 0.99, 1.0, &pol, CostSource::Oracle).unwrap();
        assert!((e.mass - 1.0).abs() < 1e-12);
        assert_eq!(e.paths, 3usize.pow(6));
        assert!(e.prob_safe > 0.0 && e.prob_safe <= 1.0 + 1e-12);
    }
}
