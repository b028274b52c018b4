use super::SafetyError;
use crate::numerics::{Graph, Reduce, Tensor, Var};

/// Clamp applied to `P` before the `log(1 - P)` branch.
pub const PROB_EPS: f64 = 1e-7;

/// Mean binary cross-entropy from log probabilities of the positive class.
///
/// The `psi = 1` branch uses `log P` directly; the `psi = 0` branch clamps
/// `P` to `[eps, 1 - eps]` first.
pub fn bce_loss(g: &mut Graph, log_p: Var, labels: &[u8]) -> Result<Var, SafetyError> {
    let [rows, cols] = g.value(log_p).shape();
    if cols != 1 || rows != labels.len() {
        return Err(SafetyError::Shape(format!(
            "bce expects a {}x1 column, got {rows}x{cols}",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(SafetyError::Usage("labels must be 0 or 1".into()));
    }
    let psi: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let not_psi: Vec<f64> = psi.iter().map(|p| 1.0 - p).collect();
    let psi_v = g.constant(Tensor::column(&psi));
    let not_psi_v = g.constant(Tensor::column(&not_psi));
    let pos = g.mul(psi_v, log_p)?;
    let p = g.exp(log_p)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let neg_p = g.neg(p)?;
    let one = g.scalar(1.0);
    let q = g.add(neg_p, one)?;
    let log_q = g.log(q)?;
    let neg = g.mul(not_psi_v, log_q)?;
    let ll = g.add(pos, neg)?;
    let m = g.mean(ll, Reduce::All)?;
    Ok(g.neg(m)?)
}

/// Per-example loss matching [`bce_loss`].
pub fn bce_value(log_p: f64, label: u8) -> f64 {
    if label == 1 {
        -log_p
    } else {
        -(1.0 - log_p.exp().clamp(PROB_EPS, 1.0 - PROB_EPS)).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_and_wrong_cases() {
        assert_eq!(bce_value(0.0, 1), 0.0);
        let eps_loss = bce_value(0.0, 0);
        assert!((eps_loss - (-(PROB_EPS).ln())).abs() < 1e-6);
        assert!((bce_value((0.3f64).ln(), 0) + (0.7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_value_and_gradient() {
        let lp = [(0.6f64).ln(), (0.2f64).ln(), -3.0];
        let labels = [1, 0, 0];
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(&lp));
        let loss = bce_loss(&mut g, v, &labels).unwrap();
        let expected: f64 = lp.iter().zip(labels).map(|(&l, y)| bce_value(l, y)).sum::<f64>() / 3.0;
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(&[-0.1, -0.2]));
        assert!(matches!(bce_loss(&mut g, v, &[1]), Err(SafetyError::Shape(_))));
        assert!(matches!(bce_loss(&mut g, v, &[1, 2]), Err(SafetyError::Usage(_))));
    }
}
