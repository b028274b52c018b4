#![allow(dead_code)]

use rand::Rng as _;

use safety_credit::envs::{ChainParams, Step, Trajectory};
use safety_credit::numerics::{seeded_rng, Gradients, Graph, ParamId, ParamStore, Reduce, Rng, Tensor, Var};
use safety_credit::safety::{bce_loss, SafetyModel};

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Neg,
    Exp,
    /// `log(softplus(x) + 0.5)`, keeping the log argument positive.
    LogPos,
}

#[derive(Clone, Debug)]
pub enum Node {
    Param(usize),
    Unary(Unary, usize),
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Concat(usize, usize),
    Sum(Reduce, usize),
    Mean(Reduce, usize),
}

/// A replayable random expression over a handful of parameter tensors.
#[derive(Clone, Debug)]
pub struct Program {
    pub params: Vec<Tensor>,
    pub nodes: Vec<Node>,
    shapes: Vec<[usize; 2]>,
    /// Largest |input| seen by an `exp` node at the initial parameters.
    pub max_exp_arg: f64,
}

fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

impl Program {
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut p = Program {
            params: Vec::new(),
            nodes: Vec::new(),
            shapes: Vec::new(),
            max_exp_arg: 0.0,
        };
        for _ in 0..rng.gen_range(2..=4) {
            let (r, c) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            p.add_param(rand_tensor(&mut rng, r, c));
        }
        for _ in 0..rng.gen_range(4..=10) {
            let n = p.nodes.len();
            let a = rng.gen_range(0..n);
            let sa = p.shapes[a];
            match rng.gen_range(0..7) {
                0 | 1 => {
                    let op = [
                        Unary::Tanh,
                        Unary::Sigmoid,
                        Unary::Softplus,
                        Unary::Neg,
                        Unary::Exp,
                        Unary::LogPos,
                    ][rng.gen_range(0..6)];
                    p.push(Node::Unary(op, a), sa);
                }
                2 => {
                    let b = p.same_shape(a, &mut rng);
                    let node = if rng.gen() { Node::Add(a, b) } else { Node::Mul(a, b) };
                    p.push(node, sa);
                }
                3 | 4 => {
                    let k = sa[1];
                    let cands: Vec<usize> = (0..n).filter(|&i| p.shapes[i][0] == k).collect();
                    let b = if cands.is_empty() || rng.gen_bool(0.3) {
                        let c = rng.gen_range(1..=3);
                        p.add_param(rand_tensor(&mut rng, k, c))
                    } else {
                        cands[rng.gen_range(0..cands.len())]
                    };
                    let sb = p.shapes[b];
                    p.push(Node::MatMul(a, b), [sa[0], sb[1]]);
                }
                5 => {
                    let cands: Vec<usize> = (0..n).filter(|&i| p.shapes[i][0] == sa[0]).collect();
                    let b = cands[rng.gen_range(0..cands.len())];
                    let sb = p.shapes[b];
                    p.push(Node::Concat(a, b), [sa[0], sa[1] + sb[1]]);
                }
                _ => {
                    let how = [Reduce::All, Reduce::PerRow, Reduce::PerColumn][rng.gen_range(0..3)];
                    let shape = match how {
                        Reduce::All => [1, 1],
                        Reduce::PerRow => [sa[0], 1],
                        Reduce::PerColumn => [1, sa[1]],
                    };
                    let node = if rng.gen() { Node::Sum(how, a) } else { Node::Mean(how, a) };
                    p.push(node, shape);
                }
            }
        }
        let store = p.store();
        let _ = p.build(&mut Graph::new(), &store);
        p
    }

    fn add_param(&mut self, t: Tensor) -> usize {
        self.params.push(t.clone());
        self.push(Node::Param(self.params.len() - 1), t.shape())
    }

    fn push(&mut self, node: Node, shape: [usize; 2]) -> usize {
        self.nodes.push(node);
        self.shapes.push(shape);
        self.nodes.len() - 1
    }

    fn same_shape(&mut self, a: usize, rng: &mut Rng) -> usize {
        let sa = self.shapes[a];
        let cands: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.shapes[i] == sa).collect();
        if cands.len() > 1 && rng.gen_bool(0.7) {
            cands[rng.gen_range(0..cands.len())]
        } else {
            self.add_param(rand_tensor(rng, sa[0], sa[1]))
        }
    }

    pub fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, t) in self.params.iter().enumerate() {
            s.add(format!("p{i}"), t.clone());
        }
        s
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().collect()
    }

    /// Scalar output: the sum over every node's total, so each parameter
    /// reaches the output.
    pub fn build(&mut self, g: &mut Graph, store: &ParamStore) -> Var {
        let ids: Vec<ParamId> = store.ids().collect();
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match *node {
                Node::Param(i) => g.param(store, ids[i]),
                Node::Unary(op, a) => {
                    let x = vars[a];
                    match op {
                        Unary::Tanh => g.tanh(x),
                        Unary::Sigmoid => g.sigmoid(x),
                        Unary::Softplus => g.softplus(x),
                        Unary::Neg => g.neg(x),
                        Unary::Exp => {
                            self.max_exp_arg = self.max_exp_arg.max(g.value(x).max_abs());
                            g.exp(x)
                        }
                        Unary::LogPos => {
                            let sp = g.softplus(x).unwrap();
                            let [r, c] = g.value(sp).shape();
                            let half = g.constant(Tensor::filled(r, c, 0.5));
                            let s = g.add(sp, half).unwrap();
                            g.log(s)
                        }
                    }
                    .unwrap()
                }
                Node::Add(a, b) => g.add(vars[a], vars[b]).unwrap(),
                Node::Mul(a, b) => g.mul(vars[a], vars[b]).unwrap(),
                Node::MatMul(a, b) => g.matmul(vars[a], vars[b]).unwrap(),
                Node::Concat(a, b) => g.concat(&[vars[a], vars[b]]).unwrap(),
                Node::Sum(how, a) => g.sum(vars[a], how).unwrap(),
                Node::Mean(how, a) => g.mean(vars[a], how).unwrap(),
            };
            vars.push(v);
        }
        let mut out = g.sum(vars[0], Reduce::All).unwrap();
        for &v in &vars[1..] {
            let s = g.sum(v, Reduce::All).unwrap();
            out = g.add(out, s).unwrap();
        }
        out
    }

    pub fn value(&mut self, store: &ParamStore) -> f64 {
        let mut g = Graph::new();
        let out = self.build(&mut g, store);
        g.value(out).item()
    }

    pub fn gradients(&mut self, store: &ParamStore) -> Gradients {
        let mut g = Graph::new();
        let out = self.build(&mut g, store);
        g.backward(out, store).unwrap()
    }
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Largest relative error between `grads` and central differences of
/// `value` over every scalar of `store`.
pub fn max_fd_error(store: &mut ParamStore, grads: &Gradients, mut value: impl FnMut(&ParamStore) -> f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..store.get(id).len() {
            let x = store.get(id).data()[k];
            let h = 1e-5 * x.abs().max(1.0);
            store.get_mut(id).data_mut()[k] = x + h;
            let fp = value(store);
            store.get_mut(id).data_mut()[k] = x - h;
            let fm = value(store);
            store.get_mut(id).data_mut()[k] = x;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(grads.get(id).data()[k], numeric));
        }
    }
    worst
}

/// BCE loss of `model` on a batch, with a fixed noise stream per call.
pub fn model_loss(model: &dyn SafetyModel, batch: &[&Trajectory], labels: &[u8], seed: u64) -> (Graph, Var) {
    let mut g = Graph::new();
    let mut rng = seeded_rng(seed);
    let lp = model.batch_log_prob(&mut g, batch, &mut rng).unwrap();
    let loss = bce_loss(&mut g, lp, labels).unwrap();
    (g, loss)
}

/// Finite-difference check of the full BCE loss of a safety model.
pub fn model_fd_error<M: SafetyModel>(model: &mut M, batch: &[Trajectory], labels: &[u8], seed: u64) -> f64 {
    let refs: Vec<&Trajectory> = batch.iter().collect();
    let grads = {
        let (g, loss) = model_loss(model, &refs, labels, seed);
        g.backward(loss, model.store()).unwrap()
    };
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..model.store().get(id).len() {
            let x = model.store().get(id).data()[k];
            let h = 1e-5 * x.abs().max(1.0);
            let at = |v: f64, m: &mut M| {
                m.store_mut().get_mut(id).data_mut()[k] = v;
                let (g, loss) = model_loss(m, &refs, labels, seed);
                g.value(loss).item()
            };
            let fp = at(x + h, model);
            let fm = at(x - h, model);
            at(x, model);
            worst = worst.max(rel_err(grads.get(id).data()[k], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

pub fn random_trajectory(rng: &mut Rng, obs_dim: usize, action_dim: usize, len: usize, id: u64) -> Trajectory {
    let mut t = Trajectory::new(id);
    for _ in 0..len {
        t.steps.push(Step {
            obs: (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: (0..action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            reward: rng.gen_range(0.0..1.0),
            true_cost: f64::from(rng.gen_bool(0.3)),
        });
    }
    t
}

/// Chain episode that follows `moves`, observed as the environment would.
pub fn chain_trajectory(params: &ChainParams, horizon: usize, moves: &[i64], id: u64) -> Trajectory {
    let mut t = Trajectory::new(id);
    let mut s = 0usize;
    for (k, &mv) in moves.iter().enumerate().take(horizon) {
        let s2 = params.next_state(s, mv);
        t.steps.push(Step {
            obs: params.observe(s, k, horizon),
            action: vec![ChainParams::encode(mv)],
            reward: params.reward(s2),
            true_cost: params.cost(s2),
        });
        s = s2;
    }
    t
}

/// Moves for a chain episode that idles at state 0, walks to the costly
/// state, dwells there past the budget, then leaves and idles again. The
/// budget-crossing step and both flat regions fit inside `horizon`.
pub fn crossing_moves(rng: &mut Rng, horizon: usize, budget: usize) -> Vec<i64> {
    let w0 = rng.gen_range(4..=12usize);
    let dwell = rng.gen_range(budget + 1..=budget + 7);
    let end = rng.gen_range(2..=5usize);
    let mut moves = vec![0; w0];
    moves.extend([1; 7]);
    moves.extend(vec![0; dwell - 1]);
    moves.extend(vec![-1; 7 - end]);
    moves.resize(horizon, 0);
    moves
}
