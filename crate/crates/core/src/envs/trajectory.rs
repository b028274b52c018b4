use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub true_cost: f64,
}

/// A contiguous run of steps `[start, start + len - 1]` from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub start: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(episode_id: u64) -> Self {
        Self {
            episode_id,
            start: 0,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of the last step; `None` for an empty trajectory.
    pub fn end(&self) -> Option<usize> {
        (!self.steps.is_empty()).then(|| self.start + self.steps.len() - 1)
    }

    pub fn total_true_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.true_cost).sum()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn discounted<F: Fn(&Step) -> f64>(&self, gamma: f64, f: F) -> f64 {
        let mut acc = 0.0;
        let mut w = 1.0;
        for s in &self.steps {
            acc += w * f(s);
            w *= gamma;
        }
        acc
    }

    /// Sub-segment covering absolute step indices `t1..=t2`.
    pub fn segment(&self, t1: usize, t2: usize) -> Result<Trajectory, EnvError> {
        let end = self
            .end()
            .ok_or_else(|| EnvError::Usage("segment of empty trajectory".into()))?;
        if t1 < self.start || t2 > end || t1 > t2 {
            return Err(EnvError::Usage(format!(
                "segment {t1}..={t2} outside {}..={end}",
                self.start
            )));
        }
        Ok(Trajectory {
            episode_id: self.episode_id,
            start: t1,
            steps: self.steps[t1 - self.start..=t2 - self.start].to_vec(),
        })
    }

    pub fn prefix(&self, len: usize) -> Result<Trajectory, EnvError> {
        if len == 0 {
            return Err(EnvError::Usage("empty prefix".into()));
        }
        self.segment(self.start, self.start + len - 1)
    }

    pub fn obs_dim(&self) -> usize {
        self.steps.first().map(|s| s.obs.len()).unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.steps.first().map(|s| s.action.len()).unwrap_or(0)
    }
}

/// One line of the trajectory log. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode_id: u64,
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub true_cost: f64,
}

pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<(), EnvError> {
    for t in trajs {
        for (i, s) in t.steps.iter().enumerate() {
            let rec = StepRecord {
                episode_id: t.episode_id,
                step: t.start + i,
                obs: s.obs.clone(),
                action: s.action.clone(),
                reward: s.reward,
                true_cost: s.true_cost,
            };
            let line = serde_json::to_string(&rec).map_err(|e| EnvError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| EnvError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// Reads a log back, starting a new trajectory whenever the episode id
/// changes or the step index is not the successor of the previous one.
pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>, EnvError> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| EnvError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)
            .map_err(|e| EnvError::Io(format!("line {}: {e}", lineno + 1)))?;
        let continues = out.last().is_some_and(|t| {
            t.episode_id == rec.episode_id && t.end().map(|e| e + 1) == Some(rec.step)
        });
        if !continues {
            out.push(Trajectory {
                episode_id: rec.episode_id,
                start: rec.step,
                steps: Vec::new(),
            });
        }
        out.last_mut().expect("just pushed").steps.push(Step {
            obs: rec.obs,
            action: rec.action,
            reward: rec.reward,
            true_cost: rec.true_cost,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(costs: &[f64]) -> Trajectory {
        Trajectory {
            episode_id: 4,
            start: 0,
            steps: costs
                .iter()
                .enumerate()
                .map(|(i, &c)| Step {
                    obs: vec![i as f64, 0.5],
                    action: vec![0.1 * i as f64],
                    reward: 1.0,
                    true_cost: c,
                })
                .collect(),
        }
    }

    #[test]
    fn segment_bounds() {
        let t = toy(&[0.0, 1.0, 1.0, 0.0]);
        let s = t.segment(1, 2).unwrap();
        assert_eq!(s.start, 1);
        assert_eq!(s.end(), Some(2));
        assert_eq!(s.total_true_cost(), 2.0);
        assert!(t.segment(2, 4).is_err());
        assert!(t.segment(3, 2).is_err());
    }

    #[test]
    fn log_round_trip_keeps_segments_apart() {
        let t = toy(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let a = t.segment(0, 1).unwrap();
        let b = t.segment(3, 4).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        // episode_id, step, obs, action, reward, true_cost in that order
        let pos: Vec<usize> = ["episode_id", "\"step\"", "obs", "action", "reward", "true_cost"]
            .iter()
            .map(|k| first.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let back = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
