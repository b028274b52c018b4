use serde::{Deserialize, Serialize};

use super::ContinualError;
use crate::envs::Trajectory;
use crate::safety::{HeadMode, ScoreDistribution, SsvModel};

/// Moments of the summed log score `sum_t X_t` under per-step independence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvEstimate {
    pub mean: f64,
    pub variance: f64,
    /// `sqrt(variance) / |mean|`.
    pub cv: f64,
}

pub fn cv_from_distributions(steps: &[ScoreDistribution]) -> Result<CvEstimate, ContinualError> {
    if steps.is_empty() {
        return Err(ContinualError::Usage("cv of an empty trajectory".into()));
    }
    let mean: f64 = steps.iter().map(ScoreDistribution::mean).sum();
    let variance: f64 = steps.iter().map(ScoreDistribution::variance).sum();
    let cv = if variance == 0.0 { 0.0 } else { variance.sqrt() / mean.abs() };
    Ok(CvEstimate { mean, variance, cv })
}

pub fn cv_score(model: &SsvModel, traj: &Trajectory) -> Result<CvEstimate, ContinualError> {
    if model.head() != HeadMode::Distributional {
        return Err(ContinualError::Usage("cv needs the distributional head".into()));
    }
    cv_from_distributions(&model.score_distributions(traj)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_example() {
        let e = cv_from_distributions(&[ScoreDistribution {
            mu: 0.0,
            sigma: (2.0f64).ln().sqrt(),
        }])
        .unwrap();
        assert!((e.mean + 2f64.sqrt()).abs() < 1e-12);
        assert!((e.variance - 2.0).abs() < 1e-12);
        assert!((e.cv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sigma() {
        let e = cv_from_distributions(&[ScoreDistribution { mu: -1.0, sigma: 0.0 }; 4]).unwrap();
        assert_eq!(e.variance, 0.0);
        assert_eq!(e.cv, 0.0);
        assert!(cv_from_distributions(&[]).is_err());
    }
}
