use super::NnError;

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Row-wise softmax of a `batch x width` buffer.
pub fn softmax_rows(logits: &[f64], width: usize) -> Vec<Vec<f64>> {
    logits.chunks(width).map(softmax).collect()
}

fn check_actions(actions: &[usize], rows: usize, width: usize) -> Result<(), NnError> {
    if actions.len() != rows {
        return Err(NnError::Shape(format!("{} actions for {rows} rows", actions.len())));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= width) {
        return Err(NnError::Shape(format!("action {a} with {width} outputs")));
    }
    Ok(())
}

fn check_targets(targets: &[f64]) -> Result<(), NnError> {
    match targets.iter().position(|w| !(0.0..=1.0).contains(w)) {
        Some(index) => Err(NnError::TargetRange { index, value: targets[index] }),
        None => Ok(()),
    }
}

/// Mean negative log-probability of the taken actions.
pub fn loss_ce(probs: &[Vec<f64>], actions: &[usize]) -> Result<f64, NnError> {
    let width = probs.first().map_or(0, Vec::len);
    check_actions(actions, probs.len(), width)?;
    Ok(probs.iter().zip(actions).map(|(p, &a)| -p[a].ln()).sum::<f64>() / probs.len() as f64)
}

/// Mean squared error; targets are constants.
pub fn loss_td(q: &[f64], targets: &[f64]) -> Result<f64, NnError> {
    if q.len() != targets.len() || q.is_empty() {
        return Err(NnError::Shape(format!("{} values for {} targets", q.len(), targets.len())));
    }
    Ok(q.iter().zip(targets).map(|(x, t)| (x - t) * (x - t)).sum::<f64>() / q.len() as f64)
}

/// Soft labels: `w` on the taken action, `(1 - w) / (|A| - 1)` elsewhere.
pub fn wce_targets(action: usize, w: f64, num_actions: usize) -> Vec<f64> {
    let rest = (1.0 - w) / (num_actions - 1) as f64;
    (0..num_actions).map(|a| if a == action { w } else { rest }).collect()
}

/// Weighted cross-entropy against [`wce_targets`] labels, averaged over the
/// batch.
pub fn loss_wce(probs: &[Vec<f64>], actions: &[usize], targets: &[f64]) -> Result<f64, NnError> {
    let width = probs.first().map_or(0, Vec::len);
    check_actions(actions, probs.len(), width)?;
    if targets.len() != probs.len() {
        return Err(NnError::Shape(format!("{} targets for {} rows", targets.len(), probs.len())));
    }
    if width < 2 {
        return Err(NnError::Shape("weighted cross-entropy needs at least two actions".into()));
    }
    check_targets(targets)?;
    let total: f64 = probs
        .iter()
        .zip(actions)
        .zip(targets)
        .map(|((p, &a), &w)| {
            let y = wce_targets(a, w, width);
            // 0 * ln(0) counts as 0
            -y.iter().zip(p).filter(|(yi, _)| **yi > 0.0).map(|(yi, pi)| yi * pi.ln()).sum::<f64>()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Objective for [`super::DenseNet::loss_and_grad`].
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Cross-entropy on softmax outputs.
    Ce { actions: &'a [usize] },
    /// Weighted cross-entropy on softmax outputs.
    Wce { actions: &'a [usize], targets: &'a [f64] },
    /// Squared error on the raw output of the taken action.
    Td { actions: &'a [usize], targets: &'a [f64] },
}

impl Loss<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Ce { .. } => "ce",
            Loss::Wce { .. } => "wce",
            Loss::Td { .. } => "td",
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub(crate) fn value_and_dlogits(&self, logits: &[f64], width: usize, batch: usize) -> Result<(f64, Vec<f64>), NnError> {
        if batch == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        let n = batch as f64;
        match *self {
            Loss::Ce { actions } => {
                check_actions(actions, batch, width)?;
                let probs = softmax_rows(logits, width);
                // log-softmax keeps the value finite when a probability underflows
                let value = -logits
                    .chunks(width)
                    .zip(actions)
                    .map(|(l, &a)| log_softmax(l)[a])
                    .sum::<f64>()
                    / n;
                let mut d = probs.concat();
                for (k, &a) in actions.iter().enumerate() {
                    d[k * width + a] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x /= n);
                Ok((value, d))
            }
            Loss::Wce { actions, targets } => {
                check_actions(actions, batch, width)?;
                if targets.len() != batch || width < 2 {
                    return Err(NnError::Shape(format!("{} targets, {width} outputs", targets.len())));
                }
                check_targets(targets)?;
                let probs = softmax_rows(logits, width);
                let mut value = 0.0;
                for ((l, &a), &w) in logits.chunks(width).zip(actions).zip(targets) {
                    let y = wce_targets(a, w, width);
                    value -= y.iter().zip(log_softmax(l)).filter(|(yi, _)| **yi > 0.0).map(|(yi, lp)| yi * lp).sum::<f64>();
                }
                value /= n;
                let mut d = Vec::with_capacity(logits.len());
                for ((p, &a), &w) in probs.iter().zip(actions).zip(targets) {
                    // labels sum to 1, so d/dlogits = p - y
                    d.extend(p.iter().zip(wce_targets(a, w, width)).map(|(pi, yi)| (pi - yi) / n));
                }
                Ok((value, d))
            }
            Loss::Td { actions, targets } => {
                check_actions(actions, batch, width)?;
                let q: Vec<f64> = actions.iter().enumerate().map(|(k, &a)| logits[k * width + a]).collect();
                let value = loss_td(&q, targets)?;
                let mut d = vec![0.0; logits.len()];
                for (k, &a) in actions.iter().enumerate() {
                    d[k * width + a] = 2.0 * (q[k] - targets[k]) / n;
                }
                Ok((value, d))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2f64.ln(), 0.0]);
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let big = softmax(&[1000.0, 999.0, 950.0]);
        assert!(big.iter().all(|x| x.is_finite() && *x > 0.0));
        assert_abs_diff_eq!(big.iter().sum::<f64>(), 1.0, epsilon = 1e-7);
    }

    #[test]
    fn softmax_shift_invariant() {
        let l = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = l.iter().map(|x| x + 17.25).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn ce_examples() {
        assert_eq!(loss_ce(&[vec![1.0, 0.0]], &[0]).unwrap(), 0.0);
        assert_abs_diff_eq!(loss_ce(&[vec![0.5, 0.5]], &[1]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let two = loss_ce(&[vec![1.0, 0.0], vec![0.5, 0.5]], &[0, 0]).unwrap();
        assert_abs_diff_eq!(two, 0.5 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(two, 0.3466, epsilon = 1e-4);
        assert!(loss_ce(&[vec![0.5, 0.5]], &[2]).is_err());
    }

    #[test]
    fn td_examples() {
        assert_eq!(loss_td(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), 0.0);
        assert_eq!(loss_td(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(loss_td(&[0.2, 0.8], &[0.5, 0.5]).unwrap(), 0.09, epsilon = 1e-15);
        assert!(loss_td(&[0.2], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn wce_examples() {
        let p = [vec![0.7, 0.3]];
        assert_abs_diff_eq!(loss_wce(&p, &[0], &[1.0]).unwrap(), -(0.7f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(loss_wce(&p, &[0], &[1.0]).unwrap(), 0.3567, epsilon = 1e-4);
        let half = loss_wce(&p, &[0], &[0.5]).unwrap();
        assert_abs_diff_eq!(half, -(0.5 * 0.7f64.ln() + 0.5 * 0.3f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(half, 0.7803, epsilon = 1e-4);
        assert!(matches!(loss_wce(&p, &[0], &[1.5]), Err(NnError::TargetRange { index: 0, .. })));
        assert!(matches!(loss_wce(&p, &[0], &[-0.1]), Err(NnError::TargetRange { .. })));
        assert!(loss_wce(&[vec![1.0]], &[0], &[0.5]).is_err());
    }

    #[test]
    fn wce_with_unit_targets_is_ce() {
        let probs = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]];
        let actions = [1, 0, 2];
        assert_eq!(loss_wce(&probs, &actions, &[1.0; 3]).unwrap(), loss_ce(&probs, &actions).unwrap());
        let logits = [0.1, -0.4, 0.9, 1.0, 0.0, -1.0];
        let ce = Loss::Ce { actions: &[2, 0] }.value_and_dlogits(&logits, 3, 2).unwrap();
        let wce = Loss::Wce { actions: &[2, 0], targets: &[1.0, 1.0] }.value_and_dlogits(&logits, 3, 2).unwrap();
        assert_eq!(ce, wce);
        let probs = softmax_rows(&logits, 3);
        assert!((ce.0 - loss_ce(&probs, &[2, 0]).unwrap()).abs() < 1e-15);
        assert!((wce.0 - loss_wce(&probs, &[2, 0], &[1.0, 1.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn wce_gradient_vanishes_when_labels_match_probs() {
        // probs (0.6, 0.2, 0.2) equal the labels for action 0 with w = 0.6
        let logits = [3f64.ln(), 0.0, 0.0];
        let (_, d) = Loss::Wce { actions: &[0], targets: &[0.6] }.value_and_dlogits(&logits, 3, 1).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-15), "{d:?}");
    }
}
