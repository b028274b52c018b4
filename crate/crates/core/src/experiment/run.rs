use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ExperimentError, LabelingMode, RunConfig};
use crate::continual::{FeedbackBuffer, LabelSource, SharedBuffer};
use crate::envs::Trajectory;
use crate::numerics::{seeded_rng, Checkpoint};
use crate::safety::{
    build_offline_dataset, train_model, CbModel, LabeledSegment, OfflineSpec, SafetyModel, SsvModel, TrainReport,
};
use crate::trainer::{
    budget_limit, collect_rollout, constraint_limit, evaluate_policy, ppo_lagrangian_update, CostMode, CostSource,
    EvalMetrics, PolicyModel, PpoTrainer,
};

/// The learned constraint model of a run.
#[derive(Clone, Debug)]
pub enum LearnedModel {
    Ssv(SsvModel),
    Cb(CbModel),
}

impl LearnedModel {
    pub fn cost_source(&self) -> CostSource<'_> {
        match self {
            LearnedModel::Ssv(m) => CostSource::Ssv(m),
            LearnedModel::Cb(m) => CostSource::Cb(m),
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn SafetyModel {
        match self {
            LearnedModel::Ssv(m) => m,
            LearnedModel::Cb(m) => m,
        }
    }

    pub fn as_ssv(&self) -> Option<&SsvModel> {
        match self {
            LearnedModel::Ssv(m) => Some(m),
            LearnedModel::Cb(_) => None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            LearnedModel::Ssv(m) => m.to_checkpoint(),
            LearnedModel::Cb(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ExperimentError> {
        Ok(match ck.kind.as_str() {
            SsvModel::KIND => LearnedModel::Ssv(SsvModel::from_checkpoint(ck)?),
            CbModel::KIND => LearnedModel::Cb(CbModel::from_checkpoint(ck)?),
            other => return Err(ExperimentError::Structure(format!("unknown model checkpoint kind `{other}`"))),
        })
    }

    fn file_name(&self) -> &'static str {
        match self {
            LearnedModel::Ssv(_) => "ssv.json",
            LearnedModel::Cb(_) => "cb.json",
        }
    }
}

/// Output of the offline pretraining stage.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: LearnedModel,
    pub dataset: Vec<LabeledSegment>,
    pub report: TrainReport,
}

/// Live view of a run, exposed by the labeling service.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed: u64,
    pub iteration: usize,
    pub steps: usize,
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub labeled: u64,
    pub finished: bool,
}

pub type SharedStatus = Arc<Mutex<RunStatus>>;

/// Optional inputs that let callers share state with a run.
#[derive(Clone, Default)]
pub struct RunHooks {
    /// Reuse this pretrained model instead of pretraining.
    pub pretrained: Option<Pretrained>,
    pub buffer: Option<SharedBuffer>,
    pub status: Option<SharedStatus>,
}

/// One line of a run's metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub steps: usize,
    pub episodes: usize,
    pub train_reward: Option<f64>,
    pub train_true_cost: Option<f64>,
    pub j_c: Option<f64>,
    pub limit: f64,
    pub lambda: f64,
    pub labeled: u64,
    pub accuracy: Option<f64>,
    pub jensen_gap: Option<f64>,
    pub retrained: bool,
    pub eval_reward: Option<f64>,
    pub eval_true_cost: Option<f64>,
    pub eval_fraction_safe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_eval: EvalMetrics,
    pub labeled: u64,
    pub iterations: usize,
    pub pretrain_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: CostMode,
    pub seeds: Vec<u64>,
    pub reward: Stat,
    pub true_cost: Stat,
    pub fraction_safe: Stat,
    pub labeled: Stat,
    pub per_seed: Vec<SeedResult>,
}

impl RunSummary {
    pub fn from_results(mode: CostMode, per_seed: Vec<SeedResult>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> Option<f64>| -> Vec<f64> { per_seed.iter().filter_map(f).collect() };
        Self {
            mode,
            seeds: per_seed.iter().map(|r| r.seed).collect(),
            reward: Stat::of(&col(&|r| r.final_eval.mean_reward)),
            true_cost: Stat::of(&col(&|r| r.final_eval.mean_true_cost)),
            fraction_safe: Stat::of(&col(&|r| r.final_eval.fraction_safe)),
            labeled: Stat::of(&col(&|r| Some(r.labeled as f64))),
            per_seed,
        }
    }
}

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

fn io(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| io(p, e))?;
    }
    let f = File::create(path).map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io(path, e))?;
    writeln!(w).map_err(|e| io(path, e))?;
    Ok(())
}

/// Offline pretraining of the learned constraint on scripted trajectories.
pub fn pretrain(cfg: &RunConfig, seed: u64) -> Result<Pretrained, ExperimentError> {
    let env = cfg.env.build()?;
    let (od, ad) = (env.obs_dim(), env.action_dim());
    let offline = OfflineSpec {
        seed: cfg.pretrain.offline.seed ^ seed,
        ..cfg.pretrain.offline.clone()
    };
    let dataset = build_offline_dataset(&cfg.env, &offline)?;
    let mut tc = cfg.pretrain.train.clone();
    tc.seed ^= seed;
    let (model, report) = match cfg.mode {
        CostMode::Ssv => {
            let mut m = SsvModel::new(cfg.ssv_config(od, ad, seed))?;
            let r = train_model(&mut m, &dataset, &tc)?;
            (LearnedModel::Ssv(m), r)
        }
        CostMode::Cb => {
            let mut m = CbModel::new(cfg.cb_config(od, ad, seed))?;
            let r = train_model(&mut m, &dataset, &tc)?;
            (LearnedModel::Cb(m), r)
        }
        CostMode::Oracle => return Err(ExperimentError::Config("oracle mode has nothing to pretrain".into())),
    };
    if let Some(acc) = report.holdout_accuracy {
        if tc.target_accuracy.is_some_and(|t| acc < t) {
            log::warn!("pretraining stopped at holdout accuracy {acc:.3}");
        }
    }
    Ok(Pretrained { model, dataset, report })
}

/// Trains every seed in the config and writes the cross-seed summary.
pub fn run_train(cfg: &RunConfig) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        results.push(run_seed(cfg, seed, RunHooks::default())?);
    }
    let summary = RunSummary::from_results(cfg.mode, results);
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

struct Checkpoints<'a> {
    dir: PathBuf,
    trainer: &'a PpoTrainer,
    model: Option<&'a LearnedModel>,
    iteration: usize,
}

impl Checkpoints<'_> {
    fn write(&self) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let (p, c) = self.trainer.policy.to_checkpoints();
        let p = p
            .with_meta("lambda", self.trainer.lambda())
            .with_meta("iteration", self.iteration);
        p.save(&self.dir.join("policy.json"))?;
        c.save(&self.dir.join("critics.json"))?;
        if let Some(m) = self.model {
            m.to_checkpoint().save(&self.dir.join(m.file_name()))?;
        }
        Ok(())
    }
}

/// Trains one seed: pretraining (unless supplied), PPO-Lagrangian with
/// periodic labeling and retraining, and a final evaluation.
pub fn run_seed(cfg: &RunConfig, seed: u64, hooks: RunHooks) -> Result<SeedResult, ExperimentError> {
    cfg.validate()?;
    let dir = seed_dir(cfg, seed);
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io(&metrics_path, e))?);

    let mut env_cfg = cfg.env.clone();
    env_cfg.seed = seed;
    let mut env = env_cfg.build()?;
    let mut eval_cfg = cfg.env.clone();
    eval_cfg.seed = seed.wrapping_add(cfg.eval.seed_offset);
    let mut eval_env = eval_cfg.build()?;
    let eval_seed = seed.wrapping_add(cfg.eval.seed_offset);
    let budget = cfg.env.budget;
    let ppo_cfg = cfg.ppo_config();

    let (mut model, pretrain_report, pretrain_data) = match cfg.mode {
        CostMode::Oracle => (None, None, Vec::new()),
        _ => {
            let pre = match hooks.pretrained.clone() {
                Some(p) => p,
                None => pretrain(cfg, seed)?,
            };
            write_json(&dir.join("pretrain_report.json"), &pre.report)?;
            (Some(pre.model), Some(pre.report), pre.dataset)
        }
    };
    let mut accuracy = pretrain_report.as_ref().and_then(|r| r.holdout_accuracy);
    let buffer: SharedBuffer = hooks
        .buffer
        .clone()
        .unwrap_or_else(|| FeedbackBuffer::new(Vec::new()).shared());
    if buffer.lock().pretraining().is_empty() && !pretrain_data.is_empty() {
        let fresh = FeedbackBuffer::new(pretrain_data);
        *buffer.lock() = fresh;
    }
    let label_source = match cfg.labeling_mode() {
        LabelingMode::Oracle => LabelSource::Oracle(cfg.env.oracle()),
        LabelingMode::Human => LabelSource::Human,
    };

    let summary_dim = model.as_ref().map_or(0, |m| m.cost_source().summary_dim());
    let mut trainer = PpoTrainer::new(ppo_cfg.clone(), env.obs_dim() + summary_dim, env.action_dim(), seed)?;
    let limit = match cfg.mode {
        CostMode::Ssv => constraint_limit(cfg.d)?,
        CostMode::Oracle => budget_limit(budget, cfg.env.horizon, ppo_cfg.cost_discount(), ppo_cfg.budget_scaling),
        CostMode::Cb => 0.0,
    };
    let mut rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut next_episode = 0u64;
    let mut window: Vec<Trajectory> = Vec::new();
    let iterations = cfg.total_steps.div_ceil(ppo_cfg.rollout_steps);
    let continual = cfg.continual.enabled && model.is_some();
    let mut steps = 0usize;

    for it in 0..iterations {
        let batch = {
            let source = model.as_ref().map_or(CostSource::Oracle, |m| m.cost_source());
            collect_rollout(
                env.as_mut(),
                &trainer.policy,
                source,
                ppo_cfg.rollout_steps,
                ppo_cfg.cost_discount(),
                &mut rng,
                &mut next_episode,
            )?
        };
        steps += batch.len();
        if let Some(g) = batch.jensen_gap {
            debug_assert!(g >= -1e-9, "jensen gap {g}");
        }
        let it_limit = match (&model, cfg.mode) {
            (Some(LearnedModel::Cb(m)), CostMode::Cb) => {
                budget_limit(m.estimated_budget(), cfg.env.horizon, ppo_cfg.cost_discount(), ppo_cfg.budget_scaling)
            }
            _ => limit,
        };
        let diag = ppo_lagrangian_update(&mut trainer, &batch, it_limit)?;

        let mut retrained = false;
        if continual {
            let model = model.as_mut().expect("continual needs a model");
            window.extend(batch.trajectories.iter().cloned());
            let mut buf = buffer.lock();
            if label_source == LabelSource::Human {
                buf.labeling_tick(label_source)?;
            }
            while window.len() >= cfg.continual.window_episodes {
                let chunk: Vec<Trajectory> = window.drain(..cfg.continual.window_episodes).collect();
                buf.begin_window();
                let mut queued = 0usize;
                for t in chunk {
                    let segs = match cfg.continual.segment_len {
                        Some(l) => (0..t.len())
                            .step_by(l)
                            .map(|s| t.segment(s, (s + l).min(t.len())))
                            .collect::<Result<Vec<_>, _>>()?,
                        None => vec![t],
                    };
                    for s in segs {
                        buf.enqueue(s, model.as_ssv())?;
                        queued += 1;
                    }
                }
                let k = ((cfg.continual.select_fraction * queued as f64).ceil() as usize).min(queued);
                buf.select_for_labeling(k);
                if let LabelSource::Oracle(_) = label_source {
                    buf.labeling_tick(label_source)?;
                }
                let report = buf.retrain(model.as_model_mut(), &cfg.continual.retrain)?;
                if !report.skipped {
                    retrained = true;
                    accuracy = report.fresh_accuracy.or(accuracy);
                }
            }
        }
        let labeled = buffer.lock().labeled_total();

        let last = it + 1 == iterations;
        let eval = if !last && cfg.eval.every > 0 && (it + 1) % cfg.eval.every == 0 && cfg.eval.periodic_episodes > 0 {
            let source = model.as_ref().map_or(CostSource::Oracle, |m| m.cost_source());
            Some(
                evaluate_policy(
                    &trainer.policy,
                    source,
                    eval_env.as_mut(),
                    cfg.eval.periodic_episodes,
                    eval_seed,
                    budget,
                    labeled,
                )?
                .metrics,
            )
        } else {
            None
        };
        let rec = IterationRecord {
            iteration: it,
            steps,
            episodes: batch.episodes.len(),
            train_reward: batch.mean_reward(),
            train_true_cost: batch.mean_true_cost(),
            j_c: diag.j_c,
            limit: it_limit,
            lambda: diag.lambda,
            labeled,
            accuracy,
            jensen_gap: batch.jensen_gap,
            retrained,
            eval_reward: eval.as_ref().and_then(|e| e.mean_reward),
            eval_true_cost: eval.as_ref().and_then(|e| e.mean_true_cost),
            eval_fraction_safe: eval.as_ref().and_then(|e| e.fraction_safe),
        };
        let line = serde_json::to_string(&rec).map_err(|e| io(&metrics_path, e))?;
        writeln!(metrics, "{line}").map_err(|e| io(&metrics_path, e))?;
        if let Some(st) = &hooks.status {
            let mut s = st.lock();
            *s = RunStatus {
                seed,
                iteration: it,
                steps,
                lambda: trainer.lambda(),
                accuracy,
                labeled,
                finished: false,
            };
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && !last {
            Checkpoints {
                dir: dir.join("checkpoints"),
                trainer: &trainer,
                model: model.as_ref(),
                iteration: it,
            }
            .write()?;
        }
    }
    metrics.flush().map_err(|e| io(&metrics_path, e))?;

    let labeled = buffer.lock().labeled_total();
    let source = model.as_ref().map_or(CostSource::Oracle, |m| m.cost_source());
    let final_eval = evaluate_policy(
        &trainer.policy,
        source,
        eval_env.as_mut(),
        cfg.eval.episodes,
        eval_seed,
        budget,
        labeled,
    )?
    .metrics;
    Checkpoints {
        dir: dir.clone(),
        trainer: &trainer,
        model: model.as_ref(),
        iteration: iterations,
    }
    .write()?;
    write_json(&dir.join("config.json"), cfg)?;
    let result = SeedResult {
        seed,
        final_eval,
        labeled,
        iterations,
        pretrain_accuracy: pretrain_report.and_then(|r| r.holdout_accuracy),
    };
    write_json(&dir.join("final_eval.json"), &result)?;
    if let Some(st) = &hooks.status {
        st.lock().finished = true;
    }
    Ok(result)
}

/// Policy and learned model restored from a seed directory.
pub fn load_run(dir: &Path) -> Result<(PolicyModel, Option<LearnedModel>), ExperimentError> {
    let policy = Checkpoint::load(&dir.join("policy.json"))?;
    let critics = Checkpoint::load(&dir.join("critics.json"))?;
    let policy = PolicyModel::from_checkpoints(&policy, &critics)?;
    let model = ["ssv.json", "cb.json"]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .map(|p| Checkpoint::load(&p).map_err(ExperimentError::from).and_then(|c| LearnedModel::from_checkpoint(&c)))
        .transpose()?;
    Ok((policy, model))
}

/// Appends `value` as one JSON line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    let line = serde_json::to_string(value).map_err(|e| io(path, e))?;
    writeln!(w, "{line}").map_err(|e| io(path, e))
}
