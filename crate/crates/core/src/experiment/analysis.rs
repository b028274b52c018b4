use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::write_json;
use super::ExperimentError;
use crate::envs::Trajectory;
use crate::safety::SsvModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub budget: f64,
    /// Upper edges of the total-cost buckets; a final open bucket follows.
    pub bucket_edges: Vec<f64>,
    /// Minimum length of a zero-cost run counted as a flat region.
    pub min_flat_len: usize,
    pub window_len: usize,
    /// Start offset of the first window; windows tile forward from here.
    pub min_offset: i64,
    /// Start offset of the last window.
    pub max_offset: i64,
    /// Steps after the crossing that a peak window must lie within.
    pub peak_range: i64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            budget: 25.0,
            bucket_edges: vec![5.0, 15.0, 25.0],
            min_flat_len: 10,
            window_len: 5,
            min_offset: -10,
            max_offset: 10,
            peak_range: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub lower: f64,
    pub upper: Option<f64>,
    pub count: usize,
    pub mean_p_safe: Option<f64>,
    /// Quartiles of the predicted safe probability: q1, median, q3.
    pub quartiles: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    /// Window start relative to the budget-crossing step.
    pub offset: i64,
    pub count: usize,
    pub mean_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAnalysis {
    pub episode_id: u64,
    pub len: usize,
    pub total_true_cost: f64,
    pub p_safe: f64,
    pub mean_abs_score: f64,
    pub flat_ratio: Option<f64>,
    /// First step at which the cumulative true cost exceeds the budget.
    pub crossing: Option<usize>,
    /// Offset of the window with the largest mean |log score|.
    pub peak_offset: Option<i64>,
    pub log_scores: Vec<f64>,
    /// Log score divided by the trajectory's minimum log score.
    pub normalized_cost: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub buckets: Vec<BucketStat>,
    pub trajectories: Vec<TrajectoryAnalysis>,
    pub windows: Vec<WindowStat>,
    /// Set when no trajectory crosses the budget.
    pub no_crossing: bool,
    pub mean_flat_ratio: Option<f64>,
    /// Mean flat-region ratio over trajectories that cross the budget.
    pub crossing_flat_ratio: Option<f64>,
    /// Share of crossing trajectories whose peak window lies inside
    /// `[0, peak_range]` steps after the crossing.
    pub peak_in_range_fraction: Option<f64>,
}

fn quartiles(sorted: &[f64]) -> [f64; 3] {
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    [q(0.25), q(0.5), q(0.75)]
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean |score| over zero-cost runs of at least `min_len` steps divided by
/// the mean |score| over the whole sequence.
pub fn flat_region_ratio(log_scores: &[f64], costs: &[f64], min_len: usize) -> Option<f64> {
    let total = mean(&log_scores.iter().map(|s| s.abs()).collect::<Vec<_>>())?;
    let mut flat = Vec::new();
    let mut start = 0;
    for t in 0..=costs.len() {
        if t == costs.len() || costs[t] != 0.0 {
            if t - start >= min_len {
                flat.extend(log_scores[start..t].iter().map(|s| s.abs()));
            }
            start = t + 1;
        }
    }
    let f = mean(&flat)?;
    Some(if total == 0.0 { 0.0 } else { f / total })
}

/// Index of the first step whose cumulative cost exceeds `budget`.
pub fn crossing_step(costs: &[f64], budget: f64) -> Option<usize> {
    let mut acc = 0.0;
    costs.iter().position(|c| {
        acc += c;
        acc > budget
    })
}

fn offsets(cfg: &AnalysisConfig) -> impl Iterator<Item = i64> {
    (cfg.min_offset..=cfg.max_offset).step_by(cfg.window_len.max(1))
}

/// `(offset, ratio)` for every in-bounds window around `crossing`.
pub fn window_ratios(log_scores: &[f64], crossing: usize, cfg: &AnalysisConfig) -> Vec<(i64, f64)> {
    let total = mean(&log_scores.iter().map(|s| s.abs()).collect::<Vec<_>>()).unwrap_or(0.0);
    if total == 0.0 || cfg.window_len == 0 {
        return Vec::new();
    }
    offsets(cfg)
        .filter_map(|o| {
            let s = crossing as i64 + o;
            let e = s + cfg.window_len as i64;
            if s < 0 || e > log_scores.len() as i64 {
                return None;
            }
            let w: f64 = log_scores[s as usize..e as usize].iter().map(|x| x.abs()).sum::<f64>() / cfg.window_len as f64;
            Some((o, w / total))
        })
        .collect()
}

fn analyze_one(log_scores: Vec<f64>, traj: &Trajectory, cfg: &AnalysisConfig) -> TrajectoryAnalysis {
    let costs: Vec<f64> = traj.steps.iter().map(|s| s.true_cost).collect();
    let min = log_scores.iter().copied().fold(0.0f64, f64::min);
    let normalized = log_scores.iter().map(|s| if min == 0.0 { 0.0 } else { s / min }).collect();
    let crossing = crossing_step(&costs, cfg.budget);
    let peak_offset = crossing.and_then(|c| {
        window_ratios(&log_scores, c, cfg)
            .into_iter()
            .fold(None, |best: Option<(i64, f64)>, (o, r)| match best {
                Some((_, br)) if br >= r => best,
                _ => Some((o, r)),
            })
            .map(|(o, _)| o)
    });
    TrajectoryAnalysis {
        episode_id: traj.episode_id,
        len: traj.len(),
        total_true_cost: traj.total_true_cost(),
        p_safe: log_scores.iter().sum::<f64>().exp(),
        mean_abs_score: mean(&log_scores.iter().map(|s| s.abs()).collect::<Vec<_>>()).unwrap_or(0.0),
        flat_ratio: flat_region_ratio(&log_scores, &costs, cfg.min_flat_len),
        crossing,
        peak_offset,
        log_scores,
        normalized_cost: normalized,
    }
}

/// Credit-assignment diagnostics from per-step log scores. Each entry of
/// `scores` pairs with the trajectory at the same index.
pub fn analyze_scores(
    scores: Vec<Vec<f64>>,
    trajectories: &[Trajectory],
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport, ExperimentError> {
    if scores.len() != trajectories.len() {
        return Err(ExperimentError::Structure("score and trajectory counts differ".into()));
    }
    let mut per: Vec<TrajectoryAnalysis> = Vec::with_capacity(trajectories.len());
    for (s, t) in scores.into_iter().zip(trajectories) {
        if s.len() != t.len() {
            return Err(ExperimentError::Structure(format!("episode {}: score length mismatch", t.episode_id)));
        }
        per.push(analyze_one(s, t, cfg));
    }

    let mut lowers = vec![f64::NEG_INFINITY];
    lowers.extend(cfg.bucket_edges.iter().copied());
    let buckets = lowers
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = cfg.bucket_edges.get(i).copied();
            let mut ps: Vec<f64> = per
                .iter()
                .filter(|a| a.total_true_cost > lo && hi.is_none_or(|h| a.total_true_cost <= h))
                .map(|a| a.p_safe)
                .collect();
            ps.sort_by(f64::total_cmp);
            BucketStat {
                lower: if lo.is_finite() { lo } else { 0.0 },
                upper: hi,
                count: ps.len(),
                mean_p_safe: mean(&ps),
                quartiles: (!ps.is_empty()).then(|| quartiles(&ps)),
            }
        })
        .collect();

    let crossing: Vec<&TrajectoryAnalysis> = per.iter().filter(|a| a.crossing.is_some()).collect();
    let windows = offsets(cfg)
        .map(|o| {
            let mut rs = Vec::new();
            for a in &per {
                if let Some(c) = a.crossing {
                    if let Some((_, r)) = window_ratios(&a.log_scores, c, cfg).into_iter().find(|(oo, _)| *oo == o) {
                        rs.push(r);
                    }
                }
            }
            WindowStat {
                offset: o,
                count: rs.len(),
                mean_ratio: mean(&rs),
            }
        })
        .collect();
    let peaks: Vec<i64> = crossing.iter().filter_map(|a| a.peak_offset).collect();
    let len = cfg.window_len as i64;
    let in_range = peaks.iter().filter(|&&o| o >= 0 && o + len <= cfg.peak_range).count();
    let peak_in_range_fraction = (!crossing.is_empty()).then(|| in_range as f64 / crossing.len() as f64);
    let flats: Vec<f64> = per.iter().filter_map(|a| a.flat_ratio).collect();
    let crossing_flats: Vec<f64> = crossing.iter().filter_map(|a| a.flat_ratio).collect();
    let crossing_flat_ratio = mean(&crossing_flats);
    Ok(AnalysisReport {
        config: cfg.clone(),
        buckets,
        no_crossing: crossing.is_empty(),
        windows: if crossing.is_empty() { Vec::new() } else { windows },
        trajectories: per,
        mean_flat_ratio: mean(&flats),
        crossing_flat_ratio,
        peak_in_range_fraction,
    })
}

/// Scores every trajectory with `model` and computes the diagnostics.
pub fn analyze(
    model: &SsvModel,
    trajectories: &[Trajectory],
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport, ExperimentError> {
    let scores = trajectories
        .iter()
        .map(|t| model.score_sequence(t).map(|s| s.log_scores))
        .collect::<Result<Vec<_>, _>>()?;
    analyze_scores(scores, trajectories, cfg)
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `analysis.json` and plot-ready CSV tables into `out_dir`.
pub fn write_report(report: &AnalysisReport, out_dir: &Path) -> Result<(), ExperimentError> {
    write_json(&out_dir.join("analysis.json"), report)?;

    let path = out_dir.join("buckets.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["lower", "upper", "count", "mean_p_safe", "q1", "median", "q3"])
        .map_err(|e| csv_err(&path, e))?;
    for b in &report.buckets {
        let q = b.quartiles.map(|q| q.map(|x| x.to_string())).unwrap_or_default();
        w.write_record([
            b.lower.to_string(),
            opt(b.upper),
            b.count.to_string(),
            opt(b.mean_p_safe),
            q[0].clone(),
            q[1].clone(),
            q[2].clone(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| csv_err(&path, e))?;

    let path = out_dir.join("windows.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["offset", "count", "mean_ratio"]).map_err(|e| csv_err(&path, e))?;
    for s in &report.windows {
        w.write_record([s.offset.to_string(), s.count.to_string(), opt(s.mean_ratio)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| csv_err(&path, e))?;

    let path = out_dir.join("trajectories.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "episode_id",
        "len",
        "total_true_cost",
        "p_safe",
        "flat_ratio",
        "crossing",
        "peak_offset",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for a in &report.trajectories {
        w.write_record([
            a.episode_id.to_string(),
            a.len.to_string(),
            a.total_true_cost.to_string(),
            a.p_safe.to_string(),
            opt(a.flat_ratio),
            a.crossing.map(|c| c.to_string()).unwrap_or_default(),
            a.peak_offset.map(|c| c.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| csv_err(&path, e))?;

    let path = out_dir.join("steps.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["episode_id", "t", "log_score", "normalized_cost"])
        .map_err(|e| csv_err(&path, e))?;
    for a in &report.trajectories {
        for (t, (s, n)) in a.log_scores.iter().zip(&a.normalized_cost).enumerate() {
            w.write_record([a.episode_id.to_string(), t.to_string(), s.to_string(), n.to_string()])
                .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(&path, e))?;
    Ok(())
}

/// Loads an SSV checkpoint and a trajectory file, analyzes, and writes the
/// report into `out_dir`.
pub fn run_analyze(
    checkpoint: &Path,
    trajectories: &Path,
    cfg: &AnalysisConfig,
    out_dir: &Path,
) -> Result<AnalysisReport, ExperimentError> {
    let ck = crate::numerics::Checkpoint::load(checkpoint)?;
    let model = SsvModel::from_checkpoint(&ck)?;
    let f = std::fs::File::open(trajectories).map_err(|e| csv_err(trajectories, e))?;
    let trajs = crate::envs::read_trajectories(std::io::BufReader::new(f))?;
    let report = analyze(&model, &trajs, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| csv_err(out_dir, e))?;
    write_report(&report, out_dir)?;
    Ok(report)
}
