//! Offline transition datasets and their on-disk format.
//!
//! One transition per JSON line with keys `traj_id, t, s, a, r, s2, done`,
//! plus a sidecar metadata document. States are integer ids for tabular
//! environments and integer token vectors for token environments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvSpec;
use crate::mdp::TabularPolicy;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("trajectory {traj_id}: {reason}")]
    Trajectory { traj_id: u64, reason: String },
    #[error("non-finite reward in trajectory {0}")]
    Reward(u64),
    #[error("state {0:?} is not a tabular state id below {1}")]
    NotTabular(Obs, usize),
    #[error("action {action} out of range for {num_actions} actions")]
    Action { action: usize, num_actions: usize },
    #[error("smoothing must be >= 0, got {0}")]
    Smoothing(f64),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A state as stored in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    State(usize),
    Tokens(Vec<u32>),
}

impl Obs {
    pub fn state_id(&self) -> Option<usize> {
        match self {
            Obs::State(s) => Some(*s),
            Obs::Tokens(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub traj_id: u64,
    #[serde(rename = "t")]
    pub step_index: u32,
    #[serde(rename = "s")]
    pub state: Obs,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: Obs,
    pub done: bool,
}

/// Sidecar metadata. The first five fields are the portable core; the rest
/// let downstream commands rebuild features and environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub gamma: f64,
    pub reward_scale: f64,
    pub seed: u64,
    pub num_trajectories: usize,
    #[serde(default)]
    pub num_actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_spec: Option<EnvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// Immutable, validated collection of complete trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    meta: DatasetMeta,
    /// `(start, end)` index ranges, one per trajectory in file order.
    spans: Vec<(usize, usize)>,
}

impl Dataset {
    /// Validates trajectory structure: each trajectory is contiguous, steps
    /// count up from 0, and only the last transition is `done`.
    pub fn new(transitions: Vec<Transition>, mut meta: DatasetMeta) -> Result<Self, DatasetError> {
        let mut spans = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut start = 0;
        while start < transitions.len() {
            let id = transitions[start].traj_id;
            if !seen.insert(id) {
                return Err(traj_err(id, "transitions are not contiguous"));
            }
            let mut end = start;
            while end < transitions.len() && transitions[end].traj_id == id {
                let tr = &transitions[end];
                if tr.step_index as usize != end - start {
                    return Err(traj_err(id, format!("step {} at position {}", tr.step_index, end - start)));
                }
                if !tr.reward.is_finite() {
                    return Err(DatasetError::Reward(id));
                }
                end += 1;
            }
            let dones = transitions[start..end].iter().filter(|t| t.done).count();
            if dones != 1 || !transitions[end - 1].done {
                return Err(traj_err(id, "exactly one done transition, at the end, is required"));
            }
            spans.push((start, end));
            start = end;
        }
        meta.num_trajectories = spans.len();
        Ok(Self { transitions, meta, spans })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn num_trajectories(&self) -> usize {
        self.spans.len()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[Transition]> + '_ {
        self.spans.iter().map(move |&(s, e)| &self.transitions[s..e])
    }

    /// Keeps whole trajectories satisfying `keep`, preserving order.
    pub fn filter_trajectories<F>(&self, mut keep: F) -> Result<Dataset, DatasetError>
    where
        F: FnMut(&[Transition]) -> bool,
    {
        let transitions: Vec<Transition> = self
            .trajectories()
            .filter(|t| keep(t))
            .flat_map(|t| t.iter().cloned())
            .collect();
        if transitions.is_empty() {
            return Err(DatasetError::Empty);
        }
        Dataset::new(transitions, self.meta.clone())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    /// Writes the dataset and its metadata sidecar.
    pub fn save(&self, data_path: &Path, meta_path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(data_path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        std::fs::write(meta_path, meta)?;
        Ok(())
    }

    pub fn load(data_path: &Path, meta_path: &Path) -> Result<Dataset, DatasetError> {
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
        let reader = BufReader::new(File::open(data_path)?);
        let mut transitions = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t = serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?;
            transitions.push(t);
        }
        Dataset::new(transitions, meta)
    }
}

fn traj_err(traj_id: u64, reason: impl Into<String>) -> DatasetError {
    DatasetError::Trajectory { traj_id, reason: reason.into() }
}

/// Undiscounted sum of rewards.
pub fn trajectory_return(traj: &[Transition]) -> f64 {
    traj.iter().map(|t| t.reward).sum()
}

/// `sum_t gamma^t r_t` with `t` counted from 0.
pub fn discounted_return(traj: &[Transition], gamma: f64) -> f64 {
    let mut g = 0.0;
    for t in traj.iter().rev() {
        g = t.reward + gamma * g;
    }
    g
}

/// Rescales rewards so every trajectory's discounted return is at most 1.
///
/// The factor is the largest discounted return in the data (or 1 if that is
/// already within bounds); it is multiplied into `meta.reward_scale`.
pub fn scale_rewards(dataset: &Dataset, gamma: f64) -> Result<(Dataset, f64), DatasetError> {
    if dataset.is_empty() {
        return Err(DatasetError::Empty);
    }
    let worst = dataset
        .trajectories()
        .map(|t| discounted_return(t, gamma))
        .fold(0.0, f64::max);
    let factor = worst.max(1.0);
    let mut meta = dataset.meta.clone();
    meta.reward_scale *= factor;
    let transitions = dataset
        .transitions
        .iter()
        .map(|t| Transition { reward: t.reward / factor, ..t.clone() })
        .collect();
    Ok((Dataset::new(transitions, meta)?, factor))
}

/// Visit counts per `(state, action)` for tabular data.
pub fn action_counts(dataset: &Dataset, num_states: usize, num_actions: usize) -> Result<Vec<u64>, DatasetError> {
    let mut counts = vec![0u64; num_states * num_actions];
    for t in dataset.transitions() {
        let s = match t.state {
            Obs::State(s) if s < num_states => s,
            ref other => return Err(DatasetError::NotTabular(other.clone(), num_states)),
        };
        if t.action >= num_actions {
            return Err(DatasetError::Action { action: t.action, num_actions });
        }
        counts[s * num_actions + t.action] += 1;
    }
    Ok(counts)
}

/// Smoothed frequency estimate of the behavior policy.
///
/// `(n(s,a) + k) / (n(s) + k |A|)`; unvisited states get uniform rows.
pub fn empirical_behavior_policy(
    dataset: &Dataset,
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<TabularPolicy, DatasetError> {
    if !(smoothing >= 0.0) {
        return Err(DatasetError::Smoothing(smoothing));
    }
    let counts = action_counts(dataset, num_states, num_actions)?;
    Ok(smoothed_policy(&counts, num_states, num_actions, smoothing))
}

pub(crate) fn smoothed_policy(counts: &[u64], num_states: usize, num_actions: usize, smoothing: f64) -> TabularPolicy {
    let mut probs = vec![0.0; num_states * num_actions];
    for s in 0..num_states {
        let row = &counts[s * num_actions..(s + 1) * num_actions];
        let total: u64 = row.iter().sum();
        let denom = total as f64 + smoothing * num_actions as f64;
        for a in 0..num_actions {
            probs[s * num_actions + a] = if denom > 0.0 {
                (row[a] as f64 + smoothing) / denom
            } else {
                1.0 / num_actions as f64
            };
        }
    }
    TabularPolicy::new(num_states, num_actions, probs).expect("rows normalized by construction")
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn jsonl_keys_and_roundtrip() {
        let ds = Dataset::new(traj(4, &[(0, 1, 0.0), (2, 0, 1.0)], 3), meta("x", 0.9)).unwrap();
        let bytes = ds.to_jsonl_bytes();
        let first = std::str::from_utf8(&bytes).unwrap().lines().next().unwrap();
        assert_eq!(first, r#"{"traj_id":4,"t":0,"s":0,"a":1,"r":0.0,"s2":2,"done":false}"#);
        let dir = tempfile::tempdir().unwrap();
        let (d, m) = (dir.path().join("d.jsonl"), dir.path().join("m.json"));
        ds.save(&d, &m).unwrap();
        assert_eq!(Dataset::load(&d, &m).unwrap(), ds);
    }

    #[test]
    fn token_states_roundtrip() {
        let t = Transition {
            traj_id: 0,
            step_index: 0,
            state: Obs::Tokens(vec![1, 2, 0]),
            action: 3,
            reward: 1.0,
            next_state: Obs::Tokens(vec![1, 2, 4]),
            done: true,
        };
        let line = serde_json::to_string(&t).unwrap();
        assert!(line.contains(r#""s":[1,2,0]"#));
        assert_eq!(serde_json::from_str::<Transition>(&line).unwrap(), t);
    }

    #[test]
    fn rejects_broken_trajectories() {
        let mut t = traj(0, &[(0, 0, 0.0), (1, 0, 0.0)], 2);
        t[0].done = true;
        assert!(Dataset::new(t, meta("x", 0.9)).is_err());
        let mut t = traj(0, &[(0, 0, 0.0), (1, 0, 0.0)], 2);
        t[1].step_index = 5;
        assert!(Dataset::new(t, meta("x", 0.9)).is_err());
        let mut t = traj(0, &[(0, 0, 0.0)], 2);
        t.extend(traj(1, &[(0, 0, 0.0)], 2));
        t.extend(traj(0, &[(0, 0, 0.0)], 2));
        assert!(Dataset::new(t, meta("x", 0.9)).is_err());
    }

    #[test]
    fn scaling_leaves_bounded_data_alone() {
        let ds = Dataset::new(traj(0, &[(0, 0, 0.0), (1, 0, 1.0)], 2), meta("x", 0.9)).unwrap();
        let (scaled, f) = scale_rewards(&ds, 0.9).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(scaled.transitions(), ds.transitions());
        let zeros = Dataset::new(traj(0, &[(0, 0, 0.0), (1, 0, 0.0)], 2), meta("x", 0.9)).unwrap();
        assert_eq!(scale_rewards(&zeros, 0.9).unwrap().1, 1.0);
    }

    #[test]
    fn scaling_two_unit_rewards_near_one_discount() {
        let gamma = 1.0 - 1e-6;
        let mut t = traj(0, &[(0, 0, 1.0), (1, 0, 1.0)], 2);
        t.extend(traj(1, &[(0, 0, 0.5)], 2));
        let ds = Dataset::new(t, meta("x", gamma)).unwrap();
        let (scaled, f) = scale_rewards(&ds, gamma).unwrap();
        // 1 + gamma is the discounted sum that must be brought down to 1.
        assert_abs_diff_eq!(f, 2.0 - 1e-6, epsilon = 1e-15);
        assert_eq!(scaled.meta().reward_scale, f);
        for tr in scaled.trajectories() {
            assert!(discounted_return(tr, gamma) <= 1.0 + 1e-15);
        }
        let rets: Vec<f64> = scaled.trajectories().map(trajectory_return).collect();
        assert!(rets[0] > rets[1]);
    }

    #[test]
    fn scaling_empty_is_error() {
        let ds = Dataset::new(vec![], meta("x", 0.9)).unwrap();
        assert!(matches!(scale_rewards(&ds, 0.9), Err(DatasetError::Empty)));
    }

    fn counted(actions: &[usize]) -> Dataset {
        let mut t = Vec::new();
        for (i, &a) in actions.iter().enumerate() {
            t.extend(traj(i as u64, &[(0, a, 0.0)], 1));
        }
        Dataset::new(t, meta("x", 0.9)).unwrap()
    }

    #[test]
    fn behavior_policy_frequencies() {
        let pi = empirical_behavior_policy(&counted(&[0, 0, 0, 1]), 2, 2, 0.0).unwrap();
        assert_eq!(pi.row(0), &[0.75, 0.25]);
        // state 1 never visited
        assert_eq!(pi.row(1), &[0.5, 0.5]);
        let pi = empirical_behavior_policy(&counted(&[0; 9]), 2, 3, 1.0).unwrap();
        assert_abs_diff_eq!(pi.prob(0, 0), 10.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.prob(0, 1), 1.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.prob(0, 2), 1.0 / 12.0, epsilon = 1e-15);
        let pi = empirical_behavior_policy(&counted(&[]), 1, 3, 1.0).unwrap();
        assert_eq!(pi.row(0), &[1.0 / 3.0; 3]);
        assert!(empirical_behavior_policy(&counted(&[0]), 1, 2, -1.0).is_err());
    }
}
