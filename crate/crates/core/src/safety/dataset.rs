//! Labeled segments, the scripted offline dataset, and the on-disk label file.
//!
//! A label file is JSONL with one [`LabelRecord`] per segment. Each record
//! points into a trajectory log (also JSONL, see [`write_trajectories`]) in
//! which every segment is stored under its own `segment_id`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SafetyError;
use crate::envs::scripted::{run_episode, BehaviourPolicy, ChainTargetPolicy, CirclingPolicy, UniformPolicy};
use crate::envs::{read_trajectories, write_trajectories, EnvConfig, Trajectory, CHAIN, HAZARD_POINT};
use crate::numerics::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OfflinePretrain,
    Oracle,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub traj: Trajectory,
    /// 1 = safe.
    pub label: u8,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behaviour {
    /// Pick the scripted family that matches the environment.
    Auto,
    Circling,
    ChainTarget,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineSpec {
    pub episodes: usize,
    pub segments: usize,
    /// Draw roughly equal numbers of safe and unsafe segments.
    pub balance: bool,
    pub behaviour: Behaviour,
    pub seed: u64,
}

impl Default for OfflineSpec {
    fn default() -> Self {
        Self {
            episodes: 200,
            segments: 2000,
            balance: true,
            behaviour: Behaviour::Auto,
            seed: 0,
        }
    }
}

fn behaviour_for(env: &EnvConfig, b: Behaviour, rng: &mut crate::numerics::Rng) -> Box<dyn BehaviourPolicy> {
    let b = match (b, env.id.as_str()) {
        (Behaviour::Auto, HAZARD_POINT) => Behaviour::Circling,
        (Behaviour::Auto, CHAIN) => Behaviour::ChainTarget,
        (Behaviour::Auto, _) => Behaviour::Uniform,
        (b, _) => b,
    };
    match b {
        Behaviour::Circling => Box::new(CirclingPolicy::sample(&env.hazard_point, env.horizon, rng)),
        Behaviour::ChainTarget => Box::new(ChainTargetPolicy::sample(&env.chain, env.horizon, rng)),
        _ => Box::new(UniformPolicy { dims: if env.id == CHAIN { 1 } else { 2 } }),
    }
}

/// Rolls scripted episodes and samples labeled prefix segments from them.
pub fn build_offline_dataset(env: &EnvConfig, spec: &OfflineSpec) -> Result<Vec<LabeledSegment>, SafetyError> {
    env.validate()?;
    if spec.episodes == 0 || spec.segments == 0 {
        return Err(SafetyError::Config("offline dataset needs episodes and segments".into()));
    }
    let oracle = env.oracle();
    let mut rng = seeded_rng(spec.seed);
    let mut episodes = Vec::with_capacity(spec.episodes);
    for ep in 0..spec.episodes {
        let mut e = env.build()?;
        let mut policy = behaviour_for(env, spec.behaviour, &mut rng);
        let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(ep as u64);
        episodes.push(run_episode(e.as_mut(), policy.as_mut(), seed, ep as u64, &mut rng)?);
    }
    let want = [spec.segments - spec.segments / 2, spec.segments / 2];
    let mut out = Vec::with_capacity(spec.segments);
    let mut counts = [0usize; 2];
    let mut spill = Vec::new();
    let attempts = spec.segments * 50;
    for _ in 0..attempts {
        if out.len() >= spec.segments {
            break;
        }
        let ep = &episodes[rng.gen_range(0..episodes.len())];
        let len = rng.gen_range(1..=ep.len());
        let seg = ep.prefix(len)?;
        let label = oracle.label(&seg)?;
        let item = LabeledSegment {
            traj: seg,
            label,
            provenance: Provenance::OfflinePretrain,
        };
        // class 0 slot holds safe segments, class 1 unsafe
        let slot = usize::from(label == 0);
        if !spec.balance || counts[slot] < want[slot] {
            counts[slot] += 1;
            out.push(item);
        } else if spill.len() < spec.segments {
            spill.push(item);
        }
    }
    if out.len() < spec.segments {
        log::warn!(
            "offline dataset could not be balanced: {} safe / {} unsafe, topping up",
            counts[0],
            counts[1]
        );
        let need = spec.segments - out.len();
        out.extend(spill.into_iter().take(need));
    }
    Ok(out)
}

/// One line of a label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub segment_id: u64,
    /// Trajectory log holding the segment, relative to the label file.
    pub log: String,
    pub source_episode: u64,
    pub t1: usize,
    pub t2: usize,
    pub label: u8,
    pub provenance: Provenance,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SafetyError {
    SafetyError::Io(format!("{}: {e}", path.display()))
}

/// Writes `<stem>.labels.jsonl` and `<stem>.traj.jsonl` into `dir` and
/// returns the label file path.
pub fn save_labeled(dir: &Path, stem: &str, data: &[LabeledSegment]) -> Result<PathBuf, SafetyError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let log_name = format!("{stem}.traj.jsonl");
    let log_path = dir.join(&log_name);
    let labels_path = dir.join(format!("{stem}.labels.jsonl"));
    let stored: Vec<Trajectory> = data
        .iter()
        .enumerate()
        .map(|(i, s)| Trajectory {
            episode_id: i as u64,
            ..s.traj.clone()
        })
        .collect();
    let f = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    write_trajectories(BufWriter::new(f), &stored)?;
    let f = File::create(&labels_path).map_err(|e| io_err(&labels_path, e))?;
    let mut w = BufWriter::new(f);
    for (i, s) in data.iter().enumerate() {
        let rec = LabelRecord {
            segment_id: i as u64,
            log: log_name.clone(),
            source_episode: s.traj.episode_id,
            t1: s.traj.start,
            t2: s.traj.start + s.traj.len(),
            label: s.label,
            provenance: s.provenance,
        };
        let line = serde_json::to_string(&rec).map_err(|e| io_err(&labels_path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(&labels_path, e))?;
    }
    w.flush().map_err(|e| io_err(&labels_path, e))?;
    Ok(labels_path)
}

/// Reads a label file and resolves every record against its trajectory log.
pub fn load_labeled(labels_path: &Path) -> Result<Vec<LabeledSegment>, SafetyError> {
    let dir = labels_path.parent().unwrap_or_else(|| Path::new("."));
    let f = File::open(labels_path).map_err(|e| io_err(labels_path, e))?;
    let mut logs: HashMap<String, HashMap<u64, Trajectory>> = HashMap::new();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(labels_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord =
            serde_json::from_str(&line).map_err(|e| io_err(labels_path, format!("line {}: {e}", n + 1)))?;
        if rec.label > 1 {
            return Err(io_err(labels_path, format!("line {}: label must be 0 or 1", n + 1)));
        }
        if !logs.contains_key(&rec.log) {
            let p = dir.join(&rec.log);
            let lf = File::open(&p).map_err(|e| io_err(&p, e))?;
            let trajs = read_trajectories(BufReader::new(lf))?;
            logs.insert(rec.log.clone(), trajs.into_iter().map(|t| (t.episode_id, t)).collect());
        }
        let stored = logs[&rec.log]
            .get(&rec.segment_id)
            .ok_or_else(|| io_err(labels_path, format!("segment {} missing from {}", rec.segment_id, rec.log)))?;
        if stored.start != rec.t1 || stored.start + stored.len() != rec.t2 {
            return Err(io_err(
                labels_path,
                format!("segment {} bounds disagree with its log", rec.segment_id),
            ));
        }
        out.push(LabeledSegment {
            traj: Trajectory {
                episode_id: rec.source_episode,
                ..stored.clone()
            },
            label: rec.label,
            provenance: rec.provenance,
        });
    }
    Ok(out)
}
