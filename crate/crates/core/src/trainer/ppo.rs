use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{gae, lambda_update, PolicyConfig, PolicyModel, PpoConfig, RolloutBatch, TrainerError};
use crate::numerics::{seeded_rng, Adam, AdamConfig, Graph, NumericsError, ParamStore, Reduce, Rng, Tensor};

/// Policy, critics, their optimizers, and the Lagrange multiplier.
#[derive(Clone, Debug)]
pub struct PpoTrainer {
    pub config: PpoConfig,
    pub policy: PolicyModel,
    policy_opt: Adam,
    critic_opt: Adam,
    lambda: f64,
    rng: Rng,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss_r: f64,
    pub value_loss_c: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub j_c: Option<f64>,
    pub limit: f64,
    pub lambda_before: f64,
    pub lambda: f64,
}

impl PpoTrainer {
    pub fn new(config: PpoConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self, TrainerError> {
        config.validate()?;
        let policy = PolicyModel::new(PolicyConfig {
            state_dim,
            action_dim,
            hidden: config.hidden,
            init_log_std: config.init_log_std,
            seed,
        })?;
        Ok(Self::from_policy(config, policy, seed))
    }

    pub fn from_policy(config: PpoConfig, policy: PolicyModel, seed: u64) -> Self {
        let policy_opt = Adam::new(AdamConfig::with_lr(config.policy_lr), &policy.policy_store);
        let critic_opt = Adam::new(AdamConfig::with_lr(config.critic_lr), &policy.critic_store);
        Self {
            lambda: config.init_lambda,
            config,
            policy,
            policy_opt,
            critic_opt,
            rng: seeded_rng(seed ^ 0x5eed_1a6b),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<(), TrainerError> {
        if !(lambda >= 0.0) {
            return Err(TrainerError::Usage("lambda must be non-negative".into()));
        }
        self.lambda = lambda;
        Ok(())
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let s = var.sqrt().max(1e-8);
    for x in v.iter_mut() {
        *x = (*x - m) / s;
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), cols, out).expect("gathered rows")
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn non_finite(e: NumericsError) -> TrainerError {
    match e {
        NumericsError::Domain { .. } => TrainerError::NonFinite(e.to_string()),
        other => other.into(),
    }
}

/// One PPO-Lagrangian update on a rollout batch, followed by the projected
/// multiplier step. On a non-finite loss the parameters are restored.
pub fn ppo_lagrangian_update(
    trainer: &mut PpoTrainer,
    batch: &RolloutBatch,
    limit: f64,
) -> Result<UpdateDiagnostics, TrainerError> {
    if batch.is_empty() {
        return Err(TrainerError::Usage("empty rollout batch".into()));
    }
    let saved_policy: ParamStore = trainer.policy.policy_store.clone();
    let saved_critic: ParamStore = trainer.policy.critic_store.clone();
    let saved_opts = (trainer.policy_opt.clone(), trainer.critic_opt.clone());
    match update_inner(trainer, batch, limit) {
        Ok(d) => Ok(d),
        Err(e) => {
            trainer.policy.policy_store = saved_policy;
            trainer.policy.critic_store = saved_critic;
            (trainer.policy_opt, trainer.critic_opt) = saved_opts;
            Err(e)
        }
    }
}

fn update_inner(trainer: &mut PpoTrainer, batch: &RolloutBatch, limit: f64) -> Result<UpdateDiagnostics, TrainerError> {
    let cfg = trainer.config.clone();
    let (mut adv_r, targ_r) = gae(
        &batch.values_r,
        &batch.rewards,
        cfg.gamma,
        cfg.gae_lambda,
        &batch.dones,
        batch.bootstrap_r,
    )?;
    let (mut adv_c, targ_c) = gae(
        &batch.values_c,
        &batch.costs,
        cfg.cost_discount(),
        cfg.gae_lambda,
        &batch.dones,
        batch.bootstrap_c,
    )?;
    normalize(&mut adv_r);
    normalize(&mut adv_c);
    let lam = trainer.lambda;
    let adv: Vec<f64> = adv_r
        .iter()
        .zip(&adv_c)
        .map(|(r, c)| (r - lam * c) / (1.0 + lam))
        .collect();

    let n = batch.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut diag = UpdateDiagnostics {
        lambda_before: lam,
        limit,
        ..UpdateDiagnostics::default()
    };
    let (mut count, mut clipped, mut kl_sum, mut samples) = (0usize, 0usize, 0.0, 0usize);
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut trainer.rng);
        for mb in idx.chunks(cfg.minibatch) {
            let states = gather(&batch.states, mb);
            let actions = gather(&batch.actions, mb);
            let old_lp = pick(&batch.log_probs, mb);
            let a = pick(&adv, mb);

            // policy
            let mut g = Graph::new();
            let s = g.constant(states.clone());
            let lp = trainer.policy.batch_log_prob(&mut g, s, &actions)?;
            let old = g.constant(Tensor::column(&old_lp));
            let diff = g.sub(lp, old)?;
            let ratio = g.exp(diff).map_err(non_finite)?;
            let av = g.constant(Tensor::column(&a));
            let unclipped = g.mul(ratio, av)?;
            let rc = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
            let clipped_term = g.mul(rc, av)?;
            // elementwise min through a constant selector
            let (u, c) = (g.value(unclipped), g.value(clipped_term));
            let sel: Vec<f64> = u.data().iter().zip(c.data()).map(|(u, c)| f64::from(u <= c)).collect();
            clipped += sel.iter().filter(|&&m| m == 0.0).count();
            for (i, &l) in g.value(lp).data().iter().enumerate() {
                kl_sum += old_lp[i] - l;
            }
            samples += mb.len();
            let not_sel: Vec<f64> = sel.iter().map(|m| 1.0 - m).collect();
            let sv = g.constant(Tensor::column(&sel));
            let nsv = g.constant(Tensor::column(&not_sel));
            let t1 = g.mul(sv, unclipped)?;
            let t2 = g.mul(nsv, clipped_term)?;
            let surr = g.add(t1, t2)?;
            let m = g.mean(surr, Reduce::All)?;
            let mut loss = g.neg(m)?;
            if cfg.entropy_coef != 0.0 {
                let ent = trainer.policy.entropy(&mut g)?;
                let e = g.scale(ent, -cfg.entropy_coef)?;
                loss = g.add(loss, e)?;
            }
            let (pl, mut grads) = g.value_and_grad(loss, &trainer.policy.policy_store).map_err(non_finite)?;
            if !pl.is_finite() || !grads.is_finite() {
                return Err(TrainerError::NonFinite(format!("policy loss {pl}")));
            }
            if cfg.max_grad_norm > 0.0 {
                grads.clip_global_norm(cfg.max_grad_norm);
            }
            trainer.policy_opt.step(&mut trainer.policy.policy_store, &grads)?;

            // critics
            let mut g = Graph::new();
            let s = g.constant(states);
            let (vr, vc) = trainer.policy.batch_values(&mut g, s)?;
            let tr = g.constant(Tensor::column(&pick(&targ_r, mb)));
            let tc = g.constant(Tensor::column(&pick(&targ_c, mb)));
            let er = g.sub(vr, tr)?;
            let er = g.square(er)?;
            let lr = g.mean(er, Reduce::All)?;
            let ec = g.sub(vc, tc)?;
            let ec = g.square(ec)?;
            let lc = g.mean(ec, Reduce::All)?;
            let closs = g.add(lr, lc)?;
            let (_, mut cgrads) = g.value_and_grad(closs, &trainer.policy.critic_store).map_err(non_finite)?;
            let (lrv, lcv) = (g.value(lr).item(), g.value(lc).item());
            if !cgrads.is_finite() {
                return Err(TrainerError::NonFinite("critic gradient".into()));
            }
            if cfg.max_grad_norm > 0.0 {
                cgrads.clip_global_norm(cfg.max_grad_norm);
            }
            trainer.critic_opt.step(&mut trainer.policy.critic_store, &cgrads)?;

            diag.policy_loss += pl;
            diag.value_loss_r += lrv;
            diag.value_loss_c += lcv;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    diag.policy_loss /= c;
    diag.value_loss_r /= c;
    diag.value_loss_c /= c;
    diag.approx_kl = kl_sum / samples.max(1) as f64;
    diag.clip_fraction = clipped as f64 / samples.max(1) as f64;
    diag.j_c = batch.j_c();
    if let Some(j) = diag.j_c {
        trainer.lambda = lambda_update(lam, j, limit, cfg.lambda_lr);
    }
    diag.lambda = trainer.lambda;
    Ok(diag)
}
