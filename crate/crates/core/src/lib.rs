//! Desk-scale offline RL laboratory.
//!
//! Q-values are learned as action likelihoods through a weighted cross-entropy
//! objective. An exact tabular solver checks the resulting conservative bounds
//! against value iteration, and a set of baselines (behavior cloning, TD
//! Q-learning, filtered BC, return-conditioned SL) share the same small dense
//! network machinery for head-to-head comparisons on toy environments.
//!
//! Module map:
//! - [`mdp`]: finite MDPs, dynamic-programming oracles, tabular policies.
//! - [`dataset`]: offline transition datasets, JSONL I/O, reward scaling.
//! - [`envs`]: stitch gridworld, mini-Wordle token MDP, random MDPs, generators.
//! - [`tabular`]: Bellman probability operators, fixed point, bound verification.
//! - [`nn`]: dense nets with exact backprop, losses, Adam, Polyak targets.
//! - [`algorithms`]: Q-SFT training and the baselines.
//! - [`eval`]: rollouts, reports, comparison tables.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod dataset;
pub mod envs;
pub mod eval;
pub mod features;
pub mod mdp;
pub mod nn;
pub mod par;
pub mod policy;
pub mod tabular;

pub use dataset::{Dataset, DatasetMeta, Obs, Transition};
pub use mdp::{QTable, TabularMdp, TabularPolicy};
pub use par::Exec;
