use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{load_run, write_json};
use super::ExperimentError;
use crate::envs::{write_trajectories, EnvConfig};
use crate::trainer::{evaluate_policy, CostSource, EvalMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub warning: Option<String>,
}

/// Evaluates the checkpoint stored in `run_dir` on `n` fresh episodes and
/// writes `eval.json` plus the evaluated trajectories next to it.
pub fn run_eval(run_dir: &Path, env: &EnvConfig, n: usize, seed: u64, labeled: u64) -> Result<EvalReport, ExperimentError> {
    let (policy, model) = load_run(run_dir)?;
    let mut e = env.build()?;
    let summary_dim = model.as_ref().map_or(0, |m| m.cost_source().summary_dim());
    if policy.config().state_dim != e.obs_dim() + summary_dim || policy.config().action_dim != e.action_dim() {
        return Err(ExperimentError::Structure(format!(
            "checkpoint expects state {} / action {}, env gives {} / {}",
            policy.config().state_dim,
            policy.config().action_dim,
            e.obs_dim() + summary_dim,
            e.action_dim()
        )));
    }
    let source = model.as_ref().map_or(CostSource::Oracle, |m| m.cost_source());
    let out = evaluate_policy(&policy, source, e.as_mut(), n, seed, env.budget, labeled)?;
    let warning = (n == 0).then(|| "no evaluation episodes requested".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let report = EvalReport {
        seed,
        metrics: out.metrics,
        warning,
    };
    write_json(&run_dir.join("eval.json"), &report)?;
    let path = run_dir.join("eval_trajectories.jsonl");
    let f = File::create(&path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
    write_trajectories(BufWriter::new(f), &out.trajectories)?;
    Ok(report)
}
