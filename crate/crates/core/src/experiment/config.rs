use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::continual::RetrainConfig;
use crate::envs::EnvConfig;
use crate::safety::{CbConfig, OfflineSpec, SsvConfig, TrainConfig};
use crate::trainer::{CostMode, PpoConfig};

pub const SEED_VAR: &str = "SAFETY_CREDIT_SEED";
pub const OUTPUT_VAR: &str = "SAFETY_CREDIT_OUTPUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingMode {
    Oracle,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub offline: OfflineSpec,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            offline: OfflineSpec::default(),
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    pub enabled: bool,
    /// Completed training episodes per labeling round.
    pub window_episodes: usize,
    /// Share of each window sent for labeling; 1 labels everything.
    pub select_fraction: f64,
    /// Slice episodes into sub-segments of this length before queueing.
    pub segment_len: Option<usize>,
    pub retrain: RetrainConfig,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window_episodes: 50,
            select_fraction: 0.2,
            segment_len: None,
            retrain: RetrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Added to the run seed to seed evaluation episodes.
    pub seed_offset: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub every: usize,
    /// Episodes for the periodic evaluations.
    pub periodic_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed_offset: 1_000_000,
            every: 10,
            periodic_episodes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: CostMode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub env: EnvConfig,
    /// Required probability that a trajectory is safe.
    #[serde(default = "default_d")]
    pub d: f64,
    #[serde(default = "default_steps")]
    pub total_steps: usize,
    #[serde(default)]
    pub labeling: Option<LabelingMode>,
    #[serde(default)]
    pub ssv: SsvConfig,
    #[serde(default)]
    pub cb: CbConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub continual: ContinualConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Write a resume checkpoint every this many iterations; 0 disables.
    #[serde(default = "default_ckpt")]
    pub checkpoint_every: usize,
}

fn default_d() -> f64 {
    0.9
}

fn default_steps() -> usize {
    300_000
}

fn default_ckpt() -> usize {
    10
}

impl RunConfig {
    /// A config with defaults for everything but the required fields.
    pub fn new(mode: CostMode, seeds: Vec<u64>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            seeds,
            output_dir: output_dir.into(),
            env: EnvConfig::default(),
            d: default_d(),
            total_steps: default_steps(),
            labeling: None,
            ssv: SsvConfig::default(),
            cb: CbConfig::default(),
            pretrain: PretrainConfig::default(),
            ppo: PpoConfig::default(),
            continual: ContinualConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: default_ckpt(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Seed and output overrides from the environment.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ExperimentError> {
        if let Some(s) = lookup(SEED_VAR) {
            let seeds = s
                .split(',')
                .map(|p| p.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Config(format!("{SEED_VAR}: {e}")))?;
            self.seeds = seeds;
        }
        if let Some(o) = lookup(OUTPUT_VAR) {
            self.output_dir = PathBuf::from(o);
        }
        self.validate()
    }

    /// Labeling source; defaults to the scripted oracle.
    pub fn labeling_mode(&self) -> LabelingMode {
        self.labeling.unwrap_or(LabelingMode::Oracle)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return bad(format!("d = {} must lie in (0, 1]", self.d));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must be set".into());
        }
        self.env.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.ppo.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let c = &self.continual;
        if c.enabled && self.mode != CostMode::Oracle {
            if c.window_episodes == 0 {
                return bad("continual.window_episodes must be positive".into());
            }
            if !(c.select_fraction > 0.0 && c.select_fraction <= 1.0) {
                return bad("continual.select_fraction must lie in (0, 1]".into());
            }
            if c.segment_len == Some(0) {
                return bad("continual.segment_len must be positive".into());
            }
        }
        if self.mode == CostMode::Oracle && self.labeling.is_some() {
            return bad("oracle mode takes no labeling source".into());
        }
        if self.mode == CostMode::Oracle && self.labeling_mode() == LabelingMode::Human {
            return bad("oracle mode cannot use human labels".into());
        }
        Ok(())
    }

    /// Model configs with dimensions filled in from the environment.
    pub fn ssv_config(&self, obs_dim: usize, action_dim: usize, seed: u64) -> SsvConfig {
        SsvConfig {
            obs_dim,
            action_dim,
            seed,
            ..self.ssv.clone()
        }
    }

    pub fn cb_config(&self, obs_dim: usize, action_dim: usize, seed: u64) -> CbConfig {
        CbConfig {
            obs_dim,
            action_dim,
            seed,
            ..self.cb.clone()
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            d: self.d,
            ..self.ppo.clone()
        }
    }
}
