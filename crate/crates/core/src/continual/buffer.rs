use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cv_score, ContinualError, CvEstimate};
use crate::envs::{read_trajectories, write_trajectories, LabelOracle, Trajectory};
use crate::numerics::seeded_rng;
use crate::safety::{
    accuracy, load_labeled, save_labeled, train_model, HeadMode, LabeledSegment, Provenance, SafetyModel,
    SsvModel, TrainConfig, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Selected,
    Labeled,
    Expired,
}

/// Who answers label requests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelSource {
    Oracle(LabelOracle),
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: u64,
    pub traj: Trajectory,
    pub cv: Option<CvEstimate>,
    /// Model estimate of `P(safe)` when the segment was enqueued.
    pub p_safe: Option<f64>,
    pub log_scores: Vec<f64>,
    pub status: QueueStatus,
    pub window: u64,
}

impl QueueEntry {
    fn cv_value(&self) -> f64 {
        self.cv.map_or(0.0, |c| c.cv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitError {
    InvalidLabel,
    Unknown,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    /// Share of each retraining set drawn from older labeled data.
    pub rehearsal_fraction: f64,
    /// Train on every label gathered so far, not just the fresh ones; the
    /// rehearsal sample then comes from the pretraining set.
    pub replay_online: bool,
    /// Most recent older online labels replayed per round.
    pub replay_limit: usize,
    pub train: TrainConfig,
    /// Accuracy re-checked after every round; a miss only logs a warning.
    pub accuracy_gate: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            rehearsal_fraction: 0.5,
            replay_online: true,
            replay_limit: 200,
            train: TrainConfig {
                epochs: 10,
                holdout_fraction: 0.0,
                ..TrainConfig::default()
            },
            accuracy_gate: 0.95,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    /// Nothing to train on.
    pub skipped: bool,
    /// Rehearsal was requested but no older data exists.
    pub rehearsal_unavailable: bool,
    pub fresh: usize,
    pub rehearsed: usize,
    pub train: Option<TrainReport>,
    /// Accuracy on the fresh labels after retraining.
    pub fresh_accuracy: Option<f64>,
    pub gate_met: Option<bool>,
}

/// Labeled and unlabeled segments gathered during training.
///
/// A segment lives in exactly one place: the unlabeled queue, the fresh set,
/// or (once a retraining round consumed it) the rehearsal pool.
#[derive(Clone, Debug, Default)]
pub struct FeedbackBuffer {
    pretraining: Vec<LabeledSegment>,
    fresh: Vec<(u64, LabeledSegment)>,
    rehearsal: Vec<LabeledSegment>,
    queue: BTreeMap<u64, QueueEntry>,
    labeled_ids: BTreeSet<u64>,
    inbox: BTreeMap<u64, u8>,
    next_id: u64,
    labeled_total: u64,
    window: u64,
}

pub type SharedBuffer = Arc<Mutex<FeedbackBuffer>>;

#[derive(Serialize, Deserialize)]
struct QueueMeta {
    id: u64,
    cv: Option<CvEstimate>,
    p_safe: Option<f64>,
    log_scores: Vec<f64>,
    status: QueueStatus,
    window: u64,
}

#[derive(Serialize, Deserialize)]
struct BufferState {
    next_id: u64,
    labeled_total: u64,
    window: u64,
    labeled_ids: Vec<u64>,
    fresh_ids: Vec<u64>,
    inbox: Vec<(u64, u8)>,
    queue: Vec<QueueMeta>,
}

fn io(e: impl std::fmt::Display) -> ContinualError {
    ContinualError::Io(e.to_string())
}

impl FeedbackBuffer {
    pub fn new(pretraining: Vec<LabeledSegment>) -> Self {
        Self {
            pretraining,
            ..Self::default()
        }
    }

    pub fn shared(self) -> SharedBuffer {
        Arc::new(Mutex::new(self))
    }

    pub fn pretraining(&self) -> &[LabeledSegment] {
        &self.pretraining
    }

    pub fn fresh(&self) -> impl Iterator<Item = &LabeledSegment> {
        self.fresh.iter().map(|(_, s)| s)
    }

    pub fn fresh_len(&self) -> usize {
        self.fresh.len()
    }

    pub fn rehearsal_pool(&self) -> &[LabeledSegment] {
        &self.rehearsal
    }

    /// Cumulative number of labels applied.
    pub fn labeled_total(&self) -> u64 {
        self.labeled_total
    }

    /// Human submissions waiting for the next labeling tick.
    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn entry(&self, id: u64) -> Option<&QueueEntry> {
        self.queue.get(&id)
    }

    pub fn status(&self, id: u64) -> Option<QueueStatus> {
        if self.labeled_ids.contains(&id) {
            return Some(QueueStatus::Labeled);
        }
        self.queue.get(&id).map(|e| e.status)
    }

    /// Queue entries with the given status, highest CV first, ties by id.
    pub fn entries_with(&self, status: QueueStatus) -> Vec<&QueueEntry> {
        let mut v: Vec<&QueueEntry> = self.queue.values().filter(|e| e.status == status).collect();
        v.sort_by(|a, b| b.cv_value().total_cmp(&a.cv_value()).then(a.id.cmp(&b.id)));
        v
    }

    /// Starts a new window: pending entries from older windows expire and
    /// expired entries are dropped.
    pub fn begin_window(&mut self) {
        self.queue.retain(|_, e| e.status != QueueStatus::Expired);
        for e in self.queue.values_mut() {
            if e.status == QueueStatus::Pending {
                e.status = QueueStatus::Expired;
            }
        }
        self.window += 1;
    }

    /// Adds an unlabeled segment, scoring it with `model` when given.
    pub fn enqueue(&mut self, traj: Trajectory, model: Option<&SsvModel>) -> Result<u64, ContinualError> {
        if traj.is_empty() {
            return Err(ContinualError::Usage("cannot enqueue an empty segment".into()));
        }
        let (cv, p_safe, log_scores) = match model {
            Some(m) => {
                let cv = if m.head() == HeadMode::Distributional {
                    Some(cv_score(m, &traj)?)
                } else {
                    None
                };
                let seq = m.score_sequence(&traj)?;
                (cv, Some(seq.total().exp()), seq.log_scores)
            }
            None => (None, None, Vec::new()),
        };
        let id = self.next_id;
        self.next_id += 1;
        self.queue.insert(
            id,
            QueueEntry {
                id,
                traj,
                cv,
                p_safe,
                log_scores,
                status: QueueStatus::Pending,
                window: self.window,
            },
        );
        Ok(id)
    }

    /// Marks the `k` pending segments with the highest CV as selected.
    pub fn select_for_labeling(&mut self, k: usize) -> Vec<u64> {
        let ids: Vec<u64> = self
            .entries_with(QueueStatus::Pending)
            .into_iter()
            .take(k)
            .map(|e| e.id)
            .collect();
        for id in &ids {
            if let Some(e) = self.queue.get_mut(id) {
                e.status = QueueStatus::Selected;
            }
        }
        ids
    }

    /// Records a human label; it is applied on the next labeling tick.
    pub fn submit(&mut self, id: u64, label: u8) -> Result<(), SubmitError> {
        if label > 1 {
            return Err(SubmitError::InvalidLabel);
        }
        if self.labeled_ids.contains(&id) || self.inbox.contains_key(&id) {
            return Err(SubmitError::Duplicate);
        }
        match self.queue.get(&id) {
            Some(e) if e.status == QueueStatus::Selected => {
                self.inbox.insert(id, label);
                Ok(())
            }
            _ => Err(SubmitError::Unknown),
        }
    }

    /// Labels one queued segment directly.
    pub fn apply_label(&mut self, id: u64, label: u8, provenance: Provenance) -> Result<(), ContinualError> {
        if label > 1 {
            return Err(ContinualError::Usage("label must be 0 or 1".into()));
        }
        if self.labeled_ids.contains(&id) {
            return Err(ContinualError::Duplicate(id));
        }
        let entry = self.queue.remove(&id).ok_or(ContinualError::UnknownSegment(id))?;
        self.labeled_ids.insert(id);
        self.fresh.push((
            id,
            LabeledSegment {
                traj: entry.traj,
                label,
                provenance,
            },
        ));
        self.labeled_total += 1;
        Ok(())
    }

    /// Applies whatever labels are available: all selected segments for the
    /// oracle, queued submissions for a human. Returns how many were applied.
    pub fn labeling_tick(&mut self, source: LabelSource) -> Result<usize, ContinualError> {
        let mut applied = 0;
        match source {
            LabelSource::Oracle(oracle) => {
                let ids: Vec<u64> = self.entries_with(QueueStatus::Selected).iter().map(|e| e.id).collect();
                for id in ids {
                    let label = oracle.label(&self.queue[&id].traj)?;
                    self.apply_label(id, label, Provenance::Oracle)?;
                    applied += 1;
                }
            }
            LabelSource::Human => {
                let inbox = std::mem::take(&mut self.inbox);
                for (id, label) in inbox {
                    self.apply_label(id, label, Provenance::Human)?;
                    applied += 1;
                }
            }
        }
        Ok(applied)
    }

    /// Fresh labels plus a uniform rehearsal sample from older data.
    fn training_set(&self, cfg: &RetrainConfig, report: &mut RetrainReport) -> Vec<LabeledSegment> {
        let mut set: Vec<LabeledSegment> = self.fresh().cloned().collect();
        let r = cfg.rehearsal_fraction.clamp(0.0, 1.0);
        let pool: Vec<&LabeledSegment> = if cfg.replay_online {
            let skip = self.rehearsal.len().saturating_sub(cfg.replay_limit);
            set.extend(self.rehearsal[skip..].iter().cloned());
            self.pretraining.iter().collect()
        } else {
            self.pretraining.iter().chain(&self.rehearsal).collect()
        };
        if r > 0.0 {
            if pool.is_empty() {
                report.rehearsal_unavailable = true;
                log::warn!("rehearsal requested but no older labeled data exists");
            } else {
                let want = if r >= 1.0 {
                    pool.len()
                } else {
                    ((r / (1.0 - r)) * set.len() as f64).round() as usize
                };
                let mut rng = seeded_rng(cfg.train.seed ^ (self.window << 20) ^ self.labeled_total);
                let picked: Vec<LabeledSegment> = pool
                    .choose_multiple(&mut rng, want.min(pool.len()))
                    .map(|s| (*s).clone())
                    .collect();
                report.rehearsed = picked.len();
                set.extend(picked);
            }
        }
        set
    }

    /// Retrains `model` on the fresh labels mixed with rehearsal data, then
    /// moves the fresh labels into the rehearsal pool.
    pub fn retrain<M: SafetyModel + ?Sized>(
        &mut self,
        model: &mut M,
        cfg: &RetrainConfig,
    ) -> Result<RetrainReport, ContinualError> {
        let mut report = RetrainReport {
            fresh: self.fresh.len(),
            ..RetrainReport::default()
        };
        if self.fresh.is_empty() {
            report.skipped = true;
            return Ok(report);
        }
        let set = self.training_set(cfg, &mut report);
        let tr = train_model(model, &set, &cfg.train)?;
        let fresh_refs: Vec<&LabeledSegment> = self.fresh().collect();
        let acc = accuracy(model, &fresh_refs)?;
        report.fresh_accuracy = Some(acc);
        report.gate_met = Some(acc >= cfg.accuracy_gate);
        if acc < cfg.accuracy_gate {
            log::warn!("retrained model accuracy {acc:.3} below gate {:.3}", cfg.accuracy_gate);
        }
        report.train = Some(tr);
        self.rehearsal.extend(self.fresh.drain(..).map(|(_, s)| s));
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ContinualError> {
        std::fs::create_dir_all(dir).map_err(io)?;
        save_labeled(dir, "pretrain", &self.pretraining)?;
        save_labeled(dir, "rehearsal", &self.rehearsal)?;
        let fresh: Vec<LabeledSegment> = self.fresh().cloned().collect();
        save_labeled(dir, "fresh", &fresh)?;
        let trajs: Vec<Trajectory> = self
            .queue
            .values()
            .map(|e| Trajectory {
                episode_id: e.id,
                ..e.traj.clone()
            })
            .collect();
        let f = File::create(dir.join("queue.traj.jsonl")).map_err(io)?;
        write_trajectories(BufWriter::new(f), &trajs)?;
        let state = BufferState {
            next_id: self.next_id,
            labeled_total: self.labeled_total,
            window: self.window,
            labeled_ids: self.labeled_ids.iter().copied().collect(),
            fresh_ids: self.fresh.iter().map(|(id, _)| *id).collect(),
            inbox: self.inbox.iter().map(|(k, v)| (*k, *v)).collect(),
            queue: self
                .queue
                .values()
                .map(|e| QueueMeta {
                    id: e.id,
                    cv: e.cv,
                    p_safe: e.p_safe,
                    log_scores: e.log_scores.clone(),
                    status: e.status,
                    window: e.window,
                })
                .collect(),
        };
        let f = File::create(dir.join("buffer.json")).map_err(io)?;
        serde_json::to_writer(BufWriter::new(f), &state).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ContinualError> {
        let f = File::open(dir.join("buffer.json")).map_err(io)?;
        let state: BufferState = serde_json::from_reader(BufReader::new(f)).map_err(io)?;
        let pretraining = load_labeled(&dir.join("pretrain.labels.jsonl"))?;
        let rehearsal = load_labeled(&dir.join("rehearsal.labels.jsonl"))?;
        let fresh_segs = load_labeled(&dir.join("fresh.labels.jsonl"))?;
        if fresh_segs.len() != state.fresh_ids.len() {
            return Err(ContinualError::Io("fresh set and buffer state disagree".into()));
        }
        let f = File::open(dir.join("queue.traj.jsonl")).map_err(io)?;
        let mut trajs: BTreeMap<u64, Trajectory> = read_trajectories(BufReader::new(f))?
            .into_iter()
            .map(|t| (t.episode_id, t))
            .collect();
        let mut queue = BTreeMap::new();
        for m in state.queue {
            let traj = trajs
                .remove(&m.id)
                .ok_or_else(|| ContinualError::Io(format!("queue segment {} missing", m.id)))?;
            queue.insert(
                m.id,
                QueueEntry {
                    id: m.id,
                    traj,
                    cv: m.cv,
                    p_safe: m.p_safe,
                    log_scores: m.log_scores,
                    status: m.status,
                    window: m.window,
                },
            );
        }
        Ok(Self {
            pretraining,
            fresh: state.fresh_ids.into_iter().zip(fresh_segs).collect(),
            rehearsal,
            queue,
            labeled_ids: state.labeled_ids.into_iter().collect(),
            inbox: state.inbox.into_iter().collect(),
            next_id: state.next_id,
            labeled_total: state.labeled_total,
            window: state.window,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Step;

    fn traj(cost: f64, len: usize) -> Trajectory {
        Trajectory {
            episode_id: 0,
            start: 0,
            steps: (0..len)
                .map(|i| Step {
                    obs: vec![i as f64],
                    action: vec![0.0],
                    reward: 0.0,
                    true_cost: cost,
                })
                .collect(),
        }
    }

    fn with_cvs(cvs: &[f64]) -> FeedbackBuffer {
        let mut b = FeedbackBuffer::new(Vec::new());
        for &c in cvs {
            let id = b.enqueue(traj(0.0, 3), None).unwrap();
            b.queue.get_mut(&id).unwrap().cv = Some(CvEstimate {
                mean: -1.0,
                variance: c * c,
                cv: c,
            });
        }
        b
    }

    #[test]
    fn selection_order_and_limits() {
        let mut b = with_cvs(&[0.1, 0.9, 0.5]);
        assert_eq!(b.select_for_labeling(2), vec![1, 2]);
        let mut b = with_cvs(&[0.1, 0.9, 0.5]);
        assert!(b.select_for_labeling(0).is_empty());
        assert_eq!(b.select_for_labeling(10), vec![1, 2, 0]);
        let mut b = with_cvs(&[0.3, 0.3, 0.3]);
        assert_eq!(b.select_for_labeling(2), vec![0, 1]);
    }

    #[test]
    fn oracle_tick_labels_selected() {
        let mut b = FeedbackBuffer::new(Vec::new());
        for i in 0..7 {
            b.enqueue(traj(if i % 2 == 0 { 1.0 } else { 0.0 }, 30), None).unwrap();
        }
        b.select_for_labeling(5);
        let n = b.labeling_tick(LabelSource::Oracle(LabelOracle::new(25.0))).unwrap();
        assert_eq!(n, 5);
        assert_eq!(b.labeled_total(), 5);
        assert_eq!(b.fresh_len(), 5);
        assert_eq!(b.entries_with(QueueStatus::Pending).len(), 2);
        for s in b.fresh() {
            assert_eq!(s.provenance, Provenance::Oracle);
            assert_eq!(s.label, u8::from(s.traj.total_true_cost() <= 25.0));
        }
    }

    #[test]
    fn human_submissions() {
        let mut b = with_cvs(&[0.2, 0.4]);
        assert_eq!(b.labeling_tick(LabelSource::Human).unwrap(), 0);
        b.select_for_labeling(1);
        assert_eq!(b.submit(0, 1), Err(SubmitError::Unknown));
        assert_eq!(b.submit(99, 1), Err(SubmitError::Unknown));
        assert_eq!(b.submit(1, 2), Err(SubmitError::InvalidLabel));
        assert_eq!(b.submit(1, 0), Ok(()));
        assert_eq!(b.submit(1, 0), Err(SubmitError::Duplicate));
        assert_eq!(b.labeling_tick(LabelSource::Human).unwrap(), 1);
        assert_eq!(b.submit(1, 1), Err(SubmitError::Duplicate));
        assert_eq!(b.status(1), Some(QueueStatus::Labeled));
        assert!(matches!(
            b.apply_label(1, 0, Provenance::Human),
            Err(ContinualError::Duplicate(1))
        ));
        assert!(matches!(
            b.apply_label(42, 0, Provenance::Human),
            Err(ContinualError::UnknownSegment(42))
        ));
    }

    #[test]
    fn windows_expire_pending() {
        let mut b = with_cvs(&[0.2, 0.4]);
        b.select_for_labeling(1);
        b.begin_window();
        assert_eq!(b.status(0), Some(QueueStatus::Expired));
        assert_eq!(b.status(1), Some(QueueStatus::Selected));
        b.begin_window();
        assert_eq!(b.status(0), None);
    }

    #[test]
    fn persistence_round_trip() {
        let mut b = FeedbackBuffer::new(vec![LabeledSegment {
            traj: traj(0.0, 4),
            label: 1,
            provenance: Provenance::OfflinePretrain,
        }]);
        for i in 0..4 {
            b.enqueue(traj(i as f64, 30), None).unwrap();
        }
        b.select_for_labeling(3);
        b.labeling_tick(LabelSource::Oracle(LabelOracle::new(25.0))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = FeedbackBuffer::load(dir.path()).unwrap();
        assert_eq!(back.labeled_total(), 3);
        assert_eq!(back.fresh_len(), 3);
        assert_eq!(back.pretraining(), b.pretraining());
        assert_eq!(back.entries_with(QueueStatus::Pending).len(), 1);
        assert_eq!(back.status(0), b.status(0));
    }
}
