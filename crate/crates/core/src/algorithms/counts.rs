use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::dataset::{action_counts, smoothed_policy, Dataset, DatasetError, Obs};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::tabular::{fixed_point_iterate, FixedPointOptions, LikelihoodTable};

/// Coverage facts from [`tabular_qsft`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    /// States never acted from in the data; leave them out of bound checks.
    pub uncovered_states: Vec<usize>,
    /// Unobserved actions at covered states.
    pub uncovered_pairs: Vec<(usize, usize)>,
    pub fixed_point_iterations: usize,
    pub residual: f64,
}

/// Count-based Q-SFT: estimates rewards, transitions and the behavior policy
/// from the data and solves the likelihood recurrence on that model.
///
/// Done transitions lead to an extra absorbing state and never bootstrap.
/// Unobserved `(s, a)` pairs get reward 0 and end the episode; with
/// `smoothing = 0` their behavior mass is 0, so they never enter a ratio max.
/// This is the limit of sample-based sweeps over the same data.
pub fn tabular_qsft(
    dataset: &Dataset,
    num_states: usize,
    num_actions: usize,
    cfg: &TrainConfig,
) -> Result<(LikelihoodTable, TabularPolicy, CountReport), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let counts = action_counts(dataset, num_states, num_actions)?;
    let behavior = smoothed_policy(&counts, num_states, num_actions, cfg.smoothing);

    let ns = num_states + 1;
    let end = num_states;
    let mut reward_sum = vec![0.0; num_states * num_actions];
    let mut next = vec![0.0; ns * num_actions * ns];
    for t in dataset.transitions() {
        let s = t.state.state_id().expect("checked by action_counts");
        let sa = s * num_actions + t.action;
        reward_sum[sa] += t.reward;
        let s2 = if t.done {
            end
        } else {
            match t.next_state {
                Obs::State(x) if x < num_states => x,
                ref other => return Err(DatasetError::NotTabular(other.clone(), num_states).into()),
            }
        };
        next[sa * ns + s2] += 1.0;
    }
    let mut reward = vec![0.0; ns * num_actions];
    let mut report = CountReport { uncovered_states: Vec::new(), uncovered_pairs: Vec::new(), fixed_point_iterations: 0, residual: 0.0 };
    for s in 0..ns {
        let covered = s < num_states && (0..num_actions).any(|a| counts[s * num_actions + a] > 0);
        if s < num_states && !covered {
            report.uncovered_states.push(s);
        }
        for a in 0..num_actions {
            let sa = s * num_actions + a;
            let n = if s < num_states { counts[sa] } else { 0 };
            if n == 0 {
                if covered {
                    report.uncovered_pairs.push((s, a));
                }
                next[sa * ns + end] = 1.0;
                continue;
            }
            reward[sa] = reward_sum[sa] / n as f64;
            for x in &mut next[sa * ns..(sa + 1) * ns] {
                *x /= n as f64;
            }
        }
    }
    let mut terminal = vec![false; ns];
    terminal[end] = true;
    let mut start = vec![0.0; ns];
    start[0] = 1.0;
    let mdp = TabularMdp::new(ns, num_actions, next, reward, terminal, start, cfg.gamma).map_err(crate::tabular::TabularError::from)?;
    let mut probs = behavior.probs().to_vec();
    probs.extend(std::iter::repeat_n(1.0 / num_actions as f64, num_actions));
    let extended = TabularPolicy::new(ns, num_actions, probs).map_err(crate::tabular::TabularError::from)?;
    let opts = FixedPointOptions { ratio_floor: cfg.ratio_floor, ..Default::default() };
    let fp = fixed_point_iterate(&mdp, &extended, &opts)?;
    report.fixed_point_iterations = fp.iterations;
    report.residual = fp.residual;
    let table = LikelihoodTable::new(num_states, num_actions, fp.likelihood.probs()[..num_states * num_actions].to_vec())?;
    Ok((table, behavior, report))
}
