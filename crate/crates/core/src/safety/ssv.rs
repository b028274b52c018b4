//! Safety summary vector model.
//!
//! A gated recurrent cell folds each `(s_t, a_t)` into a summary `h_{t+1}`;
//! a decoder compares `h_t` with `h_{t+1}` and emits the per-step log safety
//! score `log P_t <= 0`. The trajectory's log probability of being safe is
//! the sum of those scores, so the cumulative probability can only decrease
//! as steps are added.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SafetyError, SafetyModel};
use crate::envs::Trajectory;
use crate::numerics::{
    seeded_rng, softplus, Checkpoint, Dense, Graph, ParamId, ParamStore, Reduce, Rng, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One score per step, `-softplus(z)`.
    Deterministic,
    /// Negative-lognormal score per step with parameters `(mu, sigma)`.
    Distributional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// `[h_t, h_{t+1}]`
    Concat,
    /// `[h_{t+1} - h_t, h_{t+1}]`
    Difference,
}

/// How the distributional head is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistTraining {
    /// Backpropagate through `-exp(mu + sigma * eps)`.
    Reparameterized,
    /// Use the distribution mean `-exp(mu + sigma^2 / 2)`.
    Moments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsvConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    /// Width of the tanh input encoder in front of the cell; 0 feeds raw inputs.
    pub encoder: usize,
    pub decoder_hidden: usize,
    pub head: HeadMode,
    pub decoder_input: DecoderInput,
    pub dist_training: DistTraining,
    /// Per-step log score of the untrained model.
    pub init_log_score: f64,
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for SsvConfig {
    fn default() -> Self {
        Self {
            obs_dim: 1,
            action_dim: 1,
            hidden: 64,
            encoder: 64,
            decoder_hidden: 64,
            head: HeadMode::Deterministic,
            decoder_input: DecoderInput::Concat,
            dist_training: DistTraining::Reparameterized,
            init_log_score: -0.01,
            init_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SsvConfig {
    pub fn new(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            ..Self::default()
        }
    }
}

/// Fixed-width recurrent summary; `h_0` is all zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryVector(pub Vec<f64>);

impl SummaryVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Parameters of the negative-lognormal score `X = -exp(mu + sigma * eps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl ScoreDistribution {
    pub fn mean(&self) -> f64 {
        -(self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    pub fn variance(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        s2.exp_m1() * (2.0 * self.mu + s2).exp()
    }

    pub fn sample_with(&self, eps: f64) -> f64 {
        -(self.mu + self.sigma * eps).exp()
    }
}

/// Per-step log scores of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSequence {
    pub log_scores: Vec<f64>,
}

impl ScoreSequence {
    /// `log P(safe | tau_{0:t})` for every prefix.
    pub fn cumulative(&self) -> Vec<f64> {
        self.log_scores
            .iter()
            .scan(0.0, |acc, &s| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.log_scores.iter().sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GatedCell {
    update: Dense,
    candidate: Dense,
}

#[derive(Clone, Debug)]
pub struct SsvModel {
    config: SsvConfig,
    store: ParamStore,
    encoder: Option<Dense>,
    cell: GatedCell,
    trunk: Dense,
    score_head: Dense,
    sigma_head: Option<Dense>,
}

/// `softplus^{-1}(y)` for `y > 0`.
fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

const SIGMA_FLOOR: f64 = 1e-4;

impl SsvModel {
    pub const KIND: &'static str = "ssv";

    pub fn new(config: SsvConfig) -> Result<Self, SafetyError> {
        if config.obs_dim == 0 || config.action_dim == 0 || config.hidden == 0 {
            return Err(SafetyError::Config("ssv dims must be positive".into()));
        }
        if !(config.init_log_score < 0.0) || !(config.init_sigma > SIGMA_FLOOR) {
            return Err(SafetyError::Config(
                "init_log_score must be negative and init_sigma positive".into(),
            ));
        }
        let mut rng = seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let raw_in = config.obs_dim + config.action_dim;
        let encoder = (config.encoder > 0)
            .then(|| Dense::new(&mut store, "enc", raw_in, config.encoder, 1.0, &mut rng));
        let cell_in = encoder.as_ref().map_or(raw_in, |e| e.outputs) + h;
        let update = Dense::new(&mut store, "cell.update", cell_in, h, 1.0, &mut rng);
        // bias the update gate towards retaining the summary
        store.get_mut(update.bias).data_mut().fill(-1.0);
        let candidate = Dense::new(&mut store, "cell.candidate", cell_in, h, 1.0, &mut rng);
        let trunk = Dense::new(&mut store, "dec.trunk", 2 * h, config.decoder_hidden, 1.0, &mut rng);
        let score_head = Dense::new(&mut store, "dec.score", config.decoder_hidden, 1, 0.1, &mut rng);
        let sigma_head = (config.head == HeadMode::Distributional).then(|| {
            Dense::new(&mut store, "dec.sigma", config.decoder_hidden, 1, 0.1, &mut rng)
        });
        let target = -config.init_log_score;
        let score_bias = match config.head {
            // -softplus(b) = init_log_score
            HeadMode::Deterministic => inv_softplus(target),
            // -exp(mu + sigma^2 / 2) = init_log_score
            HeadMode::Distributional => target.ln() - 0.5 * config.init_sigma.powi(2),
        };
        store.get_mut(score_head.bias).data_mut()[0] = score_bias;
        if let Some(sh) = &sigma_head {
            store.get_mut(sh.bias).data_mut()[0] = inv_softplus(config.init_sigma - SIGMA_FLOOR);
        }
        Ok(Self {
            config,
            store,
            encoder,
            cell: GatedCell { update, candidate },
            trunk,
            score_head,
            sigma_head,
        })
    }

    pub fn config(&self) -> &SsvConfig {
        &self.config
    }

    pub fn head(&self) -> HeadMode {
        self.config.head
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn initial_state(&self) -> SummaryVector {
        SummaryVector::zeros(self.config.hidden)
    }

    fn check_step_dims(&self, h: &SummaryVector, obs: &[f64], action: &[f64]) -> Result<(), SafetyError> {
        if h.dim() != self.config.hidden
            || obs.len() != self.config.obs_dim
            || action.len() != self.config.action_dim
        {
            return Err(SafetyError::Shape(format!(
                "ssv step expects h{}/s{}/a{}, got h{}/s{}/a{}",
                self.config.hidden,
                self.config.obs_dim,
                self.config.action_dim,
                h.dim(),
                obs.len(),
                action.len()
            )));
        }
        Ok(())
    }

    /// Advances the summary vector by one step: `h_{t+1} = f_w(s_t, a_t, h_t)`.
    pub fn step(&self, h: &SummaryVector, obs: &[f64], action: &[f64]) -> Result<SummaryVector, SafetyError> {
        self.check_step_dims(h, obs, action)?;
        let mut x: Vec<f64> = obs.iter().chain(action).copied().collect();
        if let Some(enc) = &self.encoder {
            x = enc.apply(&self.store, &Tensor::row(&x))?.map(f64::tanh).into_data();
        }
        x.extend_from_slice(h.as_slice());
        let xin = Tensor::row(&x);
        let z = self.cell.update.apply(&self.store, &xin)?;
        let n = self.cell.candidate.apply(&self.store, &xin)?;
        let next = h
            .as_slice()
            .iter()
            .zip(z.data().iter().zip(n.data()))
            .map(|(&hv, (&zv, &nv))| {
                let zg = crate::numerics::sigmoid(zv);
                hv + zg * (nv.tanh() - hv)
            })
            .collect();
        Ok(SummaryVector(next))
    }

    fn decoder_features(&self, h: &SummaryVector, h_next: &SummaryVector) -> Result<Tensor, SafetyError> {
        if h.dim() != self.config.hidden || h_next.dim() != self.config.hidden {
            return Err(SafetyError::Shape("summary vector width mismatch".into()));
        }
        let first: Vec<f64> = match self.config.decoder_input {
            DecoderInput::Concat => h.0.clone(),
            DecoderInput::Difference => h_next.0.iter().zip(&h.0).map(|(a, b)| a - b).collect(),
        };
        let feats: Vec<f64> = first.into_iter().chain(h_next.0.iter().copied()).collect();
        let t = self.trunk.apply(&self.store, &Tensor::row(&feats))?;
        Ok(t.map(f64::tanh))
    }

    /// Deterministic per-step log score `log P_t <= 0`.
    pub fn decode(&self, h: &SummaryVector, h_next: &SummaryVector) -> Result<f64, SafetyError> {
        if self.config.head != HeadMode::Deterministic {
            return Err(SafetyError::Usage("decode needs the deterministic head".into()));
        }
        let feats = self.decoder_features(h, h_next)?;
        let z = self.score_head.apply(&self.store, &feats)?.item();
        Ok(-softplus(z))
    }

    /// Negative-lognormal parameters of the per-step log score.
    pub fn decode_dist(&self, h: &SummaryVector, h_next: &SummaryVector) -> Result<ScoreDistribution, SafetyError> {
        let sigma_head = self
            .sigma_head
            .as_ref()
            .ok_or_else(|| SafetyError::Usage("decode_dist needs the distributional head".into()))?;
        let feats = self.decoder_features(h, h_next)?;
        let mu = self.score_head.apply(&self.store, &feats)?.item();
        let rho = sigma_head.apply(&self.store, &feats)?.item();
        Ok(ScoreDistribution {
            mu,
            sigma: softplus(rho) + SIGMA_FLOOR,
        })
    }

    /// Point score used for pseudo-costs: the deterministic output, or the
    /// distribution mean for the distributional head.
    pub fn point_score(&self, h: &SummaryVector, h_next: &SummaryVector) -> Result<f64, SafetyError> {
        match self.config.head {
            HeadMode::Deterministic => self.decode(h, h_next),
            HeadMode::Distributional => Ok(self.decode_dist(h, h_next)?.mean()),
        }
    }

    fn check_traj(&self, traj: &Trajectory) -> Result<(), SafetyError> {
        if traj.is_empty() {
            return Err(SafetyError::Usage("empty trajectory".into()));
        }
        Ok(())
    }

    /// Point scores for every step, starting from `h_0` at the segment start.
    pub fn score_sequence(&self, traj: &Trajectory) -> Result<ScoreSequence, SafetyError> {
        self.check_traj(traj)?;
        let mut h = self.initial_state();
        let mut log_scores = Vec::with_capacity(traj.len());
        for s in &traj.steps {
            let next = self.step(&h, &s.obs, &s.action)?;
            log_scores.push(self.point_score(&h, &next)?);
            h = next;
        }
        Ok(ScoreSequence { log_scores })
    }

    /// Per-step distribution parameters for every step of the segment.
    pub fn score_distributions(&self, traj: &Trajectory) -> Result<Vec<ScoreDistribution>, SafetyError> {
        self.check_traj(traj)?;
        let mut h = self.initial_state();
        let mut out = Vec::with_capacity(traj.len());
        for s in &traj.steps {
            let next = self.step(&h, &s.obs, &s.action)?;
            out.push(self.decode_dist(&h, &next)?);
            h = next;
        }
        Ok(out)
    }

    /// Summary vectors `h_0 .. h_T` along a segment.
    pub fn summaries(&self, traj: &Trajectory) -> Result<Vec<SummaryVector>, SafetyError> {
        let mut hs = vec![self.initial_state()];
        for s in &traj.steps {
            let next = self.step(hs.last().expect("non-empty"), &s.obs, &s.action)?;
            hs.push(next);
        }
        Ok(hs)
    }

    /// `log P(safe | tau) = sum_t log P_t`.
    pub fn traj_log_prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError> {
        Ok(self.score_sequence(traj)?.total())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(Self::KIND, self.store.clone())
            .with_meta("head", serde_json::to_string(&self.config.head).unwrap_or_default())
            .with_meta("hidden", self.config.hidden)
            .with_meta("config", serde_json::to_string(&self.config).unwrap_or_default())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SafetyError> {
        ck.expect_kind(Self::KIND)?;
        let config: SsvConfig = serde_json::from_str(ck.meta("config")?)
            .map_err(|e| SafetyError::Config(format!("ssv config in checkpoint: {e}")))?;
        let mut model = Self::new(config)?;
        model.store.copy_from(&ck.params)?;
        Ok(model)
    }

    /// Per-step scores for a padded batch, as a `B x L` matrix with zeros past
    /// each segment's end.
    pub fn batch_scores(
        &self,
        g: &mut Graph,
        batch: &[&Trajectory],
        rng: &mut Rng,
    ) -> Result<Var, SafetyError> {
        if batch.is_empty() {
            return Err(SafetyError::Usage("empty batch".into()));
        }
        for t in batch {
            self.check_traj(t)?;
            if t.obs_dim() != self.config.obs_dim || t.action_dim() != self.config.action_dim {
                return Err(SafetyError::Shape(format!(
                    "trajectory dims s{}/a{} vs model s{}/a{}",
                    t.obs_dim(),
                    t.action_dim(),
                    self.config.obs_dim,
                    self.config.action_dim
                )));
            }
        }
        let b = batch.len();
        let len = batch.iter().map(|t| t.len()).max().unwrap_or(0);
        let hdim = self.config.hidden;
        let in_dim = self.config.obs_dim + self.config.action_dim;
        let st = &self.store;

        let mut h = g.constant(Tensor::zeros(b, hdim));
        let mut per_step = Vec::with_capacity(len);
        for t in 0..len {
            let mut x = Vec::with_capacity(b * in_dim);
            let mut mask = Vec::with_capacity(b);
            for traj in batch {
                if let Some(s) = traj.steps.get(t) {
                    x.extend_from_slice(&s.obs);
                    x.extend_from_slice(&s.action);
                    mask.push(1.0);
                } else {
                    x.extend(std::iter::repeat(0.0).take(in_dim));
                    mask.push(0.0);
                }
            }
            let all_active = mask.iter().all(|&m| m == 1.0);
            let mut xv = g.constant(Tensor::new(b, in_dim, x)?);
            if let Some(enc) = &self.encoder {
                let e = enc.forward(g, st, xv)?;
                xv = g.tanh(e)?;
            }
            let cat = g.concat(&[xv, h])?;
            let zl = self.cell.update.forward(g, st, cat)?;
            let z = g.sigmoid(zl)?;
            let nl = self.cell.candidate.forward(g, st, cat)?;
            let n = g.tanh(nl)?;
            let diff = g.sub(n, h)?;
            let mv = g.constant(Tensor::column(&mask));
            let step = g.mul(z, diff)?;
            let step = if all_active { step } else { g.mul(step, mv)? };
            let h_next = g.add(h, step)?;

            let first = match self.config.decoder_input {
                DecoderInput::Concat => h,
                DecoderInput::Difference => g.sub(h_next, h)?,
            };
            let feats = g.concat(&[first, h_next])?;
            let tr = self.trunk.forward(g, st, feats)?;
            let tr = g.tanh(tr)?;
            let zs = self.score_head.forward(g, st, tr)?;
            let score = match (&self.sigma_head, self.config.dist_training) {
                (None, _) => {
                    let sp = g.softplus(zs)?;
                    g.neg(sp)?
                }
                (Some(sh), mode) => {
                    let rho = sh.forward(g, st, tr)?;
                    let sp = g.softplus(rho)?;
                    let floor = g.scalar(SIGMA_FLOOR);
                    let sigma = g.add(sp, floor)?;
                    let expo = match mode {
                        DistTraining::Reparameterized => {
                            let eps: Vec<f64> =
                                (0..b).map(|_| StandardNormal.sample(&mut *rng)).collect();
                            let ev = g.constant(Tensor::column(&eps));
                            let se = g.mul(sigma, ev)?;
                            g.add(zs, se)?
                        }
                        DistTraining::Moments => {
                            let s2 = g.square(sigma)?;
                            let half = g.scale(s2, 0.5)?;
                            g.add(zs, half)?
                        }
                    };
                    let ex = g.exp(expo)?;
                    g.neg(ex)?
                }
            };
            let score = if all_active { score } else { g.mul(score, mv)? };
            per_step.push(score);
            h = h_next;
        }
        Ok(g.concat(&per_step)?)
    }
}

impl SafetyModel for SsvModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_log_prob(&self, g: &mut Graph, batch: &[&Trajectory], rng: &mut Rng) -> Result<Var, SafetyError> {
        let scores = self.batch_scores(g, batch, rng)?;
        Ok(g.sum(scores, Reduce::PerRow)?)
    }

    fn log_prob_safe(&self, traj: &Trajectory) -> Result<f64, SafetyError> {
        self.traj_log_prob_safe(traj)
    }
}

/// Parameter ids exposed for tests that perturb weights directly.
impl SsvModel {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }
}
