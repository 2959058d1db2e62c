//! Q-SFT training and the baselines it is compared against.
//!
//! Every trainer takes a validated [`Dataset`], the state [`Featurizer`] and
//! a [`TrainConfig`], and is deterministic given those three. RNG streams of
//! `config.seed`: 0 initializes networks, 1 drives the first (or only)
//! training phase and 2 the second.

mod baselines;
mod common;
mod config;
mod counts;
mod models;
mod qsft;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{filtered_bc, train_bc, train_rcsl, train_td_q};
pub use config::TrainConfig;
pub use counts::{tabular_qsft, CountReport};
pub use models::{NeuralPolicy, RcslPolicy, Support, TdPolicy, TrainedModel};
pub use qsft::train_qsft;

use crate::dataset::{Dataset, DatasetError};
use crate::features::FeatureError;
use crate::nn::NnError;
use crate::policy::PolicyError;
use crate::tabular::TabularError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trajectory {traj_id} has discounted return {ret} > 1; scale rewards first")]
    NotScaled { traj_id: u64, ret: f64 },
    #[error("training diverged in {phase} at update {step}")]
    Divergence { phase: &'static str, step: usize },
    #[error("filtering kept no trajectories")]
    FilteredEmpty,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Qsft,
    Bc,
    Tdq,
    FilteredBc,
    Rcsl,
}

impl Algo {
    pub const ALL: [Algo; 5] = [Algo::Qsft, Algo::Bc, Algo::Tdq, Algo::FilteredBc, Algo::Rcsl];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Qsft => "qsft",
            Algo::Bc => "bc",
            Algo::Tdq => "tdq",
            Algo::FilteredBc => "filtered-bc",
            Algo::Rcsl => "rcsl",
        }
    }

    pub fn parse(name: &str) -> Option<Algo> {
        Algo::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Per-update losses of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub phase: String,
    pub losses: Vec<f64>,
}

impl Curve {
    /// Mean loss of each block of `per_iteration` updates.
    pub fn iteration_means(&self, per_iteration: usize) -> Vec<f64> {
        self.losses.chunks(per_iteration).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedArtifacts {
    pub algo: Algo,
    pub config: TrainConfig,
    pub model: TrainedModel,
    /// One curve per phase, each with one entry per update.
    pub curves: Vec<Curve>,
    pub warnings: Vec<String>,
}

impl TrainedArtifacts {
    pub fn total_updates(&self) -> usize {
        self.curves.iter().map(|c| c.losses.len()).sum()
    }

    /// `phase,step,loss` rows.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("phase,step,loss\n");
        for c in &self.curves {
            for (i, l) in c.losses.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", c.phase, i, l));
            }
        }
        out
    }
}

/// Trailing-window divergence guard on per-iteration mean losses.
///
/// Passes when the mean of the last `window` iterations exceeds the mean of
/// the `window` before it by at most `z` standard errors of the difference.
/// Minibatch noise alone makes a plateaued loss rise half the time under a
/// strict comparison; a real upward trend fails.
pub fn trailing_window_ok(iteration_losses: &[f64], window: usize, z: f64) -> bool {
    let n = iteration_losses.len();
    if window < 2 || n < 2 * window {
        return true;
    }
    let stats = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        (m, var / xs.len() as f64)
    };
    let (last, v1) = stats(&iteration_losses[n - window..]);
    let (prev, v0) = stats(&iteration_losses[n - 2 * window..n - window]);
    last <= prev + z * (v0 + v1).sqrt()
}

fn check_scaled(dataset: &Dataset, gamma: f64) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for t in dataset.trajectories() {
        let ret = crate::dataset::discounted_return(t, gamma);
        if ret > 1.0 + 1e-9 {
            return Err(TrainError::NotScaled { traj_id: t[0].traj_id, ret });
        }
    }
    Ok(())
}

fn num_actions(dataset: &Dataset) -> usize {
    let seen = dataset.transitions().iter().map(|t| t.action + 1).max().unwrap_or(0);
    dataset.meta().num_actions.max(seen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_check() {
        let falling: Vec<f64> = (0..40).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(trailing_window_ok(&falling, 10, 0.0));
        let rising: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(!trailing_window_ok(&rising, 10, 2.0));
        assert!(trailing_window_ok(&rising[..15], 10, 0.0));
        // flat with alternating noise: rises by 0.1 against a spread of 1
        let noisy: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 } + if i >= 10 { 0.1 } else { 0.0 }).collect();
        assert!(!trailing_window_ok(&noisy, 10, 0.0));
        assert!(trailing_window_ok(&noisy, 10, 2.0));
    }

    #[test]
    fn algo_names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(Algo::parse(a.name()), Some(a));
        }
        assert_eq!(Algo::parse("ppo"), None);
    }
}
