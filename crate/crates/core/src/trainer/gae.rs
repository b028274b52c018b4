use super::TrainerError;

/// Generalized advantage estimates and value targets for one signal stream.
///
/// `dones[t]` marks `t` as the last step of its episode, which is then not
/// bootstrapped; `bootstrap` is the value after the final step when that step
/// is not terminal.
pub fn gae(
    values: &[f64],
    signals: &[f64],
    gamma: f64,
    lambda: f64,
    dones: &[bool],
    bootstrap: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainerError> {
    let n = values.len();
    if signals.len() != n || dones.len() != n {
        return Err(TrainerError::Shape(format!(
            "gae inputs differ in length: values {n}, signals {}, dones {}",
            signals.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = signals[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_terminal_step() {
        let (a, t) = gae(&[0.4], &[1.0], 1.0, 1.0, &[true], 9.0).unwrap();
        assert_eq!(a, vec![0.6]);
        assert_eq!(t, vec![1.0]);
    }

    #[test]
    fn zeros_stay_zero() {
        let (a, _) = gae(&[0.0; 5], &[0.0; 5], 0.99, 0.95, &[false, false, true, false, false], 0.0).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_zero_is_one_step() {
        let v = [0.5, -0.2, 1.0];
        let r = [1.0, 2.0, 3.0];
        let (a, _) = gae(&v, &r, 0.0, 0.95, &[false; 3], 4.0).unwrap();
        for i in 0..3 {
            assert_eq!(a[i], r[i] - v[i]);
        }
    }

    #[test]
    fn episode_boundary_blocks_bootstrap() {
        let (a, _) = gae(&[0.0, 10.0], &[1.0, 0.0], 1.0, 1.0, &[true, false], 0.0).unwrap();
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(gae(&[0.0], &[0.0, 1.0], 1.0, 1.0, &[true], 0.0), Err(TrainerError::Shape(_))));
    }
}
