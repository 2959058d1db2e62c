//! Seeded random MDPs for property tests of the bound verifier.

use rand::seq::index::sample;
use rand::Rng;

use super::EnvError;
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::par::stream_rng;

pub const DEFAULT_BEHAVIOR_FLOOR: f64 = 0.05;

/// Random MDP plus a full-support behavior policy with the default floor.
pub fn random_mdp(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    discount: f64,
    seed: u64,
) -> Result<(TabularMdp, TabularPolicy), EnvError> {
    random_mdp_with_floor(num_states, num_actions, branching, discount, seed, DEFAULT_BEHAVIOR_FLOOR)
}

/// Each `(s, a)` moves to `branching` distinct successors with flat-Dirichlet
/// weights. Rewards are uniform in `[0, 1 - discount]`, so every discounted
/// return stays below 1. No state is terminal and the start is uniform.
///
/// Behavior rows are `floor + (1 - A * floor) * w` with `w` a random
/// distribution, so every action keeps at least `floor` mass.
pub fn random_mdp_with_floor(
    num_states: usize,
    num_actions: usize,
    branching: usize,
    discount: f64,
    seed: u64,
    floor: f64,
) -> Result<(TabularMdp, TabularPolicy), EnvError> {
    if num_states == 0 || num_actions == 0 || branching == 0 || branching > num_states {
        return Err(EnvError::Params(format!(
            "num_states={num_states}, num_actions={num_actions}, branching={branching}"
        )));
    }
    if !(0.0..=1.0 / num_actions as f64).contains(&floor) {
        return Err(EnvError::Params(format!("behavior floor {floor} with {num_actions} actions")));
    }
    let mut rng = stream_rng(seed, 0);
    let n = num_states;
    let mut transition = vec![0.0; n * num_actions * n];
    let mut reward = vec![0.0; n * num_actions];
    for sa in 0..n * num_actions {
        let succ = sample(&mut rng, n, branching);
        let weights = flat_dirichlet(&mut rng, branching);
        for (s2, w) in succ.iter().zip(weights) {
            transition[sa * n + s2] = w;
        }
        reward[sa] = rng.random::<f64>() * (1.0 - discount);
    }
    let mdp = TabularMdp::new(
        n,
        num_actions,
        transition,
        reward,
        vec![false; n],
        vec![1.0 / n as f64; n],
        discount,
    )?;
    let mut probs = Vec::with_capacity(n * num_actions);
    let spare = 1.0 - num_actions as f64 * floor;
    for _ in 0..n {
        probs.extend(flat_dirichlet(&mut rng, num_actions).into_iter().map(|w| floor + spare * w));
    }
    let behavior = TabularPolicy::new(n, num_actions, probs)?;
    Ok((mdp, behavior))
}

fn flat_dirichlet<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    // Exp(1) draws normalized to sum 1; 1 - u keeps the log argument positive.
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}
