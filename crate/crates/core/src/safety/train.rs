use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{bce_loss, bce_value, LabeledSegment, SafetyError, SafetyModel};
use crate::envs::Trajectory;
use crate::numerics::{seeded_rng, Adam, AdamConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    /// Stop once holdout accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 3e-3,
            holdout_fraction: 0.1,
            grad_clip: 1.0,
            target_accuracy: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Holdout accuracy after each epoch.
    pub holdout_curve: Vec<f64>,
    pub holdout_accuracy: Option<f64>,
    pub holdout_loss: Option<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub epochs_run: usize,
    pub single_class: bool,
}

/// Fraction of segments whose thresholded `P(safe) >= 0.5` matches the label.
pub fn accuracy<M: SafetyModel + ?Sized>(model: &M, data: &[&LabeledSegment]) -> Result<f64, SafetyError> {
    if data.is_empty() {
        return Err(SafetyError::Usage("accuracy of an empty set".into()));
    }
    let half = 0.5f64.ln();
    let mut hits = 0usize;
    for s in data {
        let pred = u8::from(model.log_prob_safe(&s.traj)? >= half);
        hits += usize::from(pred == s.label);
    }
    Ok(hits as f64 / data.len() as f64)
}

fn mean_loss<M: SafetyModel + ?Sized>(model: &M, data: &[&LabeledSegment]) -> Result<f64, SafetyError> {
    let mut total = 0.0;
    for s in data {
        total += bce_value(model.log_prob_safe(&s.traj)?, s.label);
    }
    Ok(total / data.len() as f64)
}

/// Batches of similar length: shuffle, then sort within windows of a few
/// batches to limit padding.
fn bucketed_batches(idx: &mut [usize], lens: &[usize], batch: usize, rng: &mut crate::numerics::Rng) -> Vec<Vec<usize>> {
    idx.shuffle(rng);
    let window = batch * 8;
    for chunk in idx.chunks_mut(window) {
        chunk.sort_by_key(|&i| lens[i]);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Minimises mean binary cross-entropy of `model` on `data`, holding out a
/// seeded fraction for accuracy tracking.
pub fn train_model<M: SafetyModel + ?Sized>(
    model: &mut M,
    data: &[LabeledSegment],
    cfg: &TrainConfig,
) -> Result<TrainReport, SafetyError> {
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(SafetyError::Config("holdout_fraction must lie in [0, 1)".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SafetyError::Config("batch_size must be positive".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(SafetyError::Usage("cannot train on an empty dataset".into()));
    }
    let safe = data.iter().filter(|s| s.label == 1).count();
    if safe == 0 || safe == data.len() {
        report.single_class = true;
        log::warn!("training set holds a single class ({} segments)", data.len());
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut n_hold = (cfg.holdout_fraction * data.len() as f64).round() as usize;
    if cfg.holdout_fraction > 0.0 && data.len() >= 2 {
        n_hold = n_hold.clamp(1, data.len() - 1);
    }
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<&LabeledSegment> = hold_idx.iter().map(|&i| &data[i]).collect();
    let train: Vec<&LabeledSegment> = train_idx.iter().map(|&i| &data[i]).collect();
    report.train_size = train.len();
    report.holdout_size = holdout.len();
    let lens: Vec<usize> = train.iter().map(|s| s.traj.len()).collect();

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.store());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.epochs {
        let batches = bucketed_batches(&mut idx, &lens, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for b in &batches {
            let trajs: Vec<&Trajectory> = b.iter().map(|&i| &train[i].traj).collect();
            let labels: Vec<u8> = b.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let lp = model.batch_log_prob(&mut g, &trajs, &mut rng)?;
            let loss = bce_loss(&mut g, lp, &labels)?;
            let (value, mut grads) = g.value_and_grad(loss, model.store())?;
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            adam.step(model.store_mut(), &grads)?;
            total += value * b.len() as f64;
        }
        report.loss_curve.push(total / train.len() as f64);
        report.epochs_run += 1;
        if !holdout.is_empty() {
            let acc = accuracy(model, &holdout)?;
            report.holdout_curve.push(acc);
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    if !holdout.is_empty() {
        report.holdout_accuracy = Some(accuracy(model, &holdout)?);
        report.holdout_loss = Some(mean_loss(model, &holdout)?);
    }
    Ok(report)
}
