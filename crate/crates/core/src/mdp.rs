//! Finite MDPs and their exact dynamic-programming oracles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("mdp must have at least one state and one action")]
    Empty,
    #[error("{what} has length {got}, expected {expected}")]
    Shape {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("transition row (s={state}, a={action}) sums to {sum}")]
    TransitionRow { state: usize, action: usize, sum: f64 },
    #[error("negative or non-finite transition probability at (s={state}, a={action})")]
    TransitionEntry { state: usize, action: usize },
    #[error("initial distribution sums to {0}")]
    InitialDist(f64),
    #[error("reward r(s={state}, a={action}) = {value} outside [0, 1]")]
    Reward { state: usize, action: usize, value: f64 },
    #[error("terminal state {0} must self-loop with probability 1 and zero reward")]
    Terminal(usize),
    #[error("discount {0} outside [0, 1)")]
    Discount(f64),
    #[error("policy row {state} sums to {sum}")]
    PolicyRow { state: usize, sum: f64 },
    #[error("policy entry at (s={state}, a={action}) outside [0, 1]")]
    PolicyEntry { state: usize, action: usize },
    #[error("policy is {got_states}x{got_actions}, mdp is {states}x{actions}")]
    PolicyShape {
        got_states: usize,
        got_actions: usize,
        states: usize,
        actions: usize,
    },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

/// Exact finite MDP with an absorbing-terminal convention.
///
/// `transition` is a dense `(state, action, next_state)` tensor in row-major
/// order; `reward` holds mean rewards per `(state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        if num_states == 0 || num_actions == 0 {
            return Err(MdpError::Empty);
        }
        let sa = num_states * num_actions;
        check_len("transition", transition.len(), sa * num_states)?;
        check_len("reward", reward.len(), sa)?;
        check_len("terminal", terminal.len(), num_states)?;
        check_len("initial_dist", initial_dist.len(), num_states)?;
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::Discount(discount));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &transition[(s * num_actions + a) * num_states..][..num_states];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(MdpError::TransitionEntry { state: s, action: a });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SUM_TOL {
                    return Err(MdpError::TransitionRow { state: s, action: a, sum });
                }
                let r = reward[s * num_actions + a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(MdpError::Reward { state: s, action: a, value: r });
                }
                if terminal[s] && (row[s] != 1.0 || r != 0.0) {
                    return Err(MdpError::Terminal(s));
                }
            }
        }
        if initial_dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MdpError::InitialDist(f64::NAN));
        }
        let init_sum: f64 = initial_dist.iter().sum();
        if (init_sum - 1.0).abs() > SUM_TOL {
            return Err(MdpError::InitialDist(init_sum));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            terminal,
            initial_dist,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.num_actions + action]
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminal
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P(. | state, action)` as a dense row over next states.
    pub fn next_dist(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition_tensor(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Same dynamics with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self, MdpError> {
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::Discount(discount));
        }
        Ok(Self { discount, ..self.clone() })
    }

    /// One application of the optimality operator to `q`.
    pub fn bellman_optimality(&self, q: &QTable) -> QTable {
        let v = q.max_values();
        self.backup_with(&v)
    }

    /// `r + gamma * P v` for a state-value vector `v`.
    fn backup_with(&self, v: &[f64]) -> QTable {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut values = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = self
                    .next_dist(s, a)
                    .iter()
                    .zip(v)
                    .map(|(p, v)| p * v)
                    .sum();
                values[s * na + a] = self.reward(s, a) + self.discount * ev;
            }
        }
        QTable { num_states: ns, num_actions: na, values }
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), MdpError> {
    if got != expected {
        return Err(MdpError::Shape { what, got, expected });
    }
    Ok(())
}

/// Scalar per `(state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, values: vec![0.0; num_states * num_actions] }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self, MdpError> {
        check_len("q values", values.len(), num_states * num_actions)?;
        Ok(Self { num_states, num_actions, values })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `V(s) = max_a Q(s, a)`.
    pub fn max_values(&self) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Sup-norm distance to another table of the same shape.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Deterministic greedy policy, ties to the lowest action id.
    pub fn greedy_policy(&self) -> TabularPolicy {
        let actions: Vec<usize> = (0..self.num_states).map(|s| argmax(self.row(s))).collect();
        TabularPolicy::deterministic(self.num_actions, &actions)
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Action distribution per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        check_len("policy", probs.len(), num_states * num_actions)?;
        for s in 0..num_states {
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            for (a, p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(p) {
                    return Err(MdpError::PolicyEntry { state: s, action: a });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(MdpError::PolicyRow { state: s, sum });
            }
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self { num_states: actions.len(), num_actions, probs }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions {
            return Err(MdpError::PolicyShape {
                got_states: self.num_states,
                got_actions: self.num_actions,
                states: mdp.num_states,
                actions: mdp.num_actions,
            });
        }
        Ok(())
    }
}

/// Result of an iterative solve, with the per-iteration sup-norm residuals.
#[derive(Debug, Clone)]
pub struct Solve {
    pub q: QTable,
    pub residuals: Vec<f64>,
}

/// Optimal Q-function by value iteration.
///
/// Stops at the first iterate whose change is at most `tol`; the returned
/// table therefore has Bellman residual at most `gamma * tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<QTable, MdpError> {
    value_iteration_traced(mdp, tol, max_iters).map(|s| s.q)
}

pub fn value_iteration_traced(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<Solve, MdpError> {
    iterate(mdp, tol, max_iters, |q| mdp.bellman_optimality(q))
}

/// On-policy Q-function `Q^pi` by iterating the expectation backup.
pub fn policy_q(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<QTable, MdpError> {
    policy.check_against(mdp)?;
    iterate(mdp, tol, max_iters_for(mdp.discount, tol), |q| {
        let v: Vec<f64> = (0..mdp.num_states)
            .map(|s| q.row(s).iter().zip(policy.row(s)).map(|(q, p)| q * p).sum())
            .collect();
        mdp.backup_with(&v)
    })
    .map(|s| s.q)
}

/// `J(pi) = sum_s mu(s) sum_a pi(a|s) Q^pi(s, a)`.
pub fn expected_return(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64, MdpError> {
    let q = policy_q(mdp, policy, 1e-13)?;
    Ok(mdp
        .initial_dist
        .iter()
        .enumerate()
        .map(|(s, mu)| mu * state_value(&q, policy, s))
        .sum())
}

/// `V^pi(s)` from a Q-table.
pub fn state_value(q: &QTable, policy: &TabularPolicy, state: usize) -> f64 {
    q.row(state).iter().zip(policy.row(state)).map(|(q, p)| q * p).sum()
}

fn max_iters_for(discount: f64, tol: f64) -> usize {
    // Residual shrinks by gamma per sweep from at most 1/(1-gamma).
    if discount == 0.0 {
        return 2;
    }
    let sweeps = ((tol * (1.0 - discount)).ln() / discount.ln()).ceil();
    (sweeps.max(1.0) as usize).saturating_mul(2).saturating_add(10)
}

fn iterate<F>(mdp: &TabularMdp, tol: f64, max_iters: usize, step: F) -> Result<Solve, MdpError>
where
    F: Fn(&QTable) -> QTable,
{
    if !(tol > 0.0) {
        return Err(MdpError::Tolerance(tol));
    }
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut residuals = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = step(&q);
        residual = next.sup_distance(&q);
        residuals.push(residual);
        q = next;
        if residual <= tol {
            return Ok(Solve { q, residuals });
        }
    }
    Err(MdpError::NotConverged { iterations: max_iters, residual })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// One non-terminal state whose actions all end the episode.
    pub fn terminal_bandit(rewards: &[f64], discount: f64) -> TabularMdp {
        let na = rewards.len();
        let mut transition = vec![0.0; 2 * na * 2];
        let mut reward = vec![0.0; 2 * na];
        for a in 0..na {
            transition[a * 2 + 1] = 1.0;
            transition[(na + a) * 2 + 1] = 1.0;
            reward[a] = rewards[a];
        }
        TabularMdp::new(2, na, transition, reward, vec![false, true], vec![1.0, 0.0], discount).unwrap()
    }

    /// s0 -a0-> s1 (r=0), s0 -a1-> end (r=0.2), s1 -a0-> end (r=1), s1 -a1-> end (r=0).
    pub fn two_state_chain(discount: f64) -> TabularMdp {
        let (ns, na) = (3, 2);
        let mut t = vec![0.0; ns * na * ns];
        let idx = |s: usize, a: usize, s2: usize| (s * na + a) * ns + s2;
        t[idx(0, 0, 1)] = 1.0;
        t[idx(0, 1, 2)] = 1.0;
        t[idx(1, 0, 2)] = 1.0;
        t[idx(1, 1, 2)] = 1.0;
        t[idx(2, 0, 2)] = 1.0;
        t[idx(2, 1, 2)] = 1.0;
        let reward = vec![0.0, 0.2, 1.0, 0.0, 0.0, 0.0];
        TabularMdp::new(ns, na, t, reward, vec![false, false, true], vec![1.0, 0.0, 0.0], discount)
            .unwrap()
    }
}
