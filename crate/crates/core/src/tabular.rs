//! Bellman probability operators on finite MDPs.
//!
//! A likelihood table `p(a|s)` is backed up as
//! `B p(a|s) = r(s,a) + gamma * sum_s' P(s'|s,a) * max_a' p(a'|s') / pi_b(a'|s')`,
//! with the max restricted to actions whose behavior mass reaches a floor.
//! The weighted cross-entropy objective is stationary where
//!
//! `p(a|s) = pi_b(a|s) B(a|s) + sum_{a' != a} pi_b(a'|s) (1 - B(a'|s)) / (|A| - 1)`,
//!
//! with backups clamped to `[0, 1]`. [`fixed_point_iterate`] solves that
//! equation and [`verify_bounds`] compares the solution with `Q*` and
//! `pi_b * Q*`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Obs, Transition};
use crate::envs::{collect_dataset, random_mdp_with_floor, EnvError, EnvSpec, DEFAULT_BEHAVIOR_FLOOR};
use crate::mdp::{argmax, value_iteration, MdpError, QTable, TabularMdp, TabularPolicy};
use crate::par::{map_indexed, stream_rng, try_map_indexed, Exec};
use crate::policy::{PolicyError, ProbabilityModel};

pub const DEFAULT_RATIO_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("no action at state {state:?} has behavior mass >= {floor}")]
    NoSupportedAction { state: Obs, floor: f64 },
    #[error("the recurrence needs at least two actions")]
    SingleAction,
    #[error("likelihood entry ({state}, {action}) = {value} outside [0, 1]")]
    Entry { state: usize, action: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fixed point not reached after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid option: {0}")]
    Options(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Per-state action likelihoods, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl LikelihoodTable {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, TabularError> {
        if probs.len() != num_states * num_actions {
            return Err(TabularError::Shape(format!(
                "{} entries for {num_states}x{num_actions}",
                probs.len()
            )));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(TabularError::Entry { state: i / num_actions, action: i % num_actions, value: probs[i] });
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn from_policy(policy: &TabularPolicy) -> Self {
        Self {
            num_states: policy.num_states(),
            num_actions: policy.num_actions(),
            probs: policy.probs().to_vec(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..][..self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest `|sum_a p(a|s) - 1|` over states.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.num_states)
            .map(|s| (self.row(s).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl ProbabilityModel for LikelihoodTable {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError> {
        states
            .iter()
            .map(|obs| match obs {
                Obs::State(s) if *s < self.num_states => Ok(self.row(*s).to_vec()),
                other => Err(PolicyError::UndefinedState((*other).clone())),
            })
            .collect()
    }
}

/// `max_a p(a) / pi_b(a)` over actions with `pi_b(a) >= floor`; ties go to
/// the lowest action id. `None` if no action is supported.
pub fn max_ratio(p: &[f64], behavior: &[f64], floor: f64) -> Option<f64> {
    argmax_ratio(p, behavior, floor).map(|a| p[a] / behavior[a])
}

fn check_dims(p: &LikelihoodTable, behavior: &TabularPolicy, mdp: &TabularMdp) -> Result<(), TabularError> {
    let dims = (mdp.num_states(), mdp.num_actions());
    if (p.num_states, p.num_actions) != dims || (behavior.num_states(), behavior.num_actions()) != dims {
        return Err(TabularError::Shape(format!(
            "mdp {dims:?}, likelihood {:?}, behavior {:?}",
            (p.num_states, p.num_actions),
            (behavior.num_states(), behavior.num_actions())
        )));
    }
    Ok(())
}

/// Per-state successor value `max_a' p/pi_b`, zero at terminal states.
fn successor_values(
    p: &LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    floor: f64,
) -> Result<Vec<f64>, TabularError> {
    (0..mdp.num_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                return Ok(0.0);
            }
            max_ratio(p.row(s), behavior.row(s), floor)
                .ok_or(TabularError::NoSupportedAction { state: Obs::State(s), floor })
        })
        .collect()
}

/// Unclamped true backup `B p` for every `(s, a)`. Terminal states and
/// terminal successors contribute no bootstrap term.
pub fn true_backup(
    p: &LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    ratio_floor: f64,
) -> Result<QTable, TabularError> {
    check_dims(p, behavior, mdp)?;
    let m = successor_values(p, behavior, mdp, ratio_floor)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            if mdp.is_terminal(s) {
                out.push(mdp.reward(s, a));
                continue;
            }
            let boot: f64 = mdp.next_dist(s, a).iter().zip(&m).map(|(pr, v)| pr * v).sum();
            out.push(mdp.reward(s, a) + mdp.discount() * boot);
        }
    }
    Ok(QTable::from_values(ns, na, out)?)
}

/// One application of the stationarity map to a state row, given clamped
/// backups for that row.
pub fn recurrence_row(behavior: &[f64], backups: &[f64]) -> Vec<f64> {
    let k = (behavior.len() - 1) as f64;
    let spill: f64 = behavior.iter().zip(backups).map(|(pi, b)| pi * (1.0 - b)).sum();
    behavior
        .iter()
        .zip(backups)
        .map(|(pi, b)| pi * b + (spill - pi * (1.0 - b)) / k)
        .collect()
}

/// Sweeps over which the damped residual must halve before the solver
/// switches to smoothed Newton continuation.
const STALL_WINDOW: usize = 500;
const MAX_BACKTRACKS: u32 = 30;
const NEWTON_ITERS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    /// Stop when `sup |F(p) - p|` is at most this.
    pub tol: f64,
    pub max_iters: usize,
    /// Step size of `p <- (1 - d) p + d F(p)`; 1 is the plain recurrence.
    pub damping: f64,
    pub ratio_floor: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iters: 200_000, damping: 0.5, ratio_floor: DEFAULT_RATIO_FLOOR, exec: Exec::Sequential }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Damped,
    Newton,
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub likelihood: LikelihoodTable,
    /// Unclamped backups of the returned table.
    pub backups: QTable,
    /// Damped sweeps plus Newton iterations.
    pub iterations: usize,
    pub residual: f64,
    /// Phase that reached the tolerance.
    pub solver: Solver,
    /// Some unclamped backup at the solution lies outside `[0, 1]`.
    pub clamp_active: bool,
}

/// `F(p)` for every state, plus the unclamped backups it used.
fn apply_map(
    p: &LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    opts: &FixedPointOptions,
) -> Result<(Vec<f64>, QTable), TabularError> {
    let b = true_backup(p, behavior, mdp, opts.ratio_floor)?;
    let rows = map_indexed(opts.exec, mdp.num_states(), |s| {
        let clamped: Vec<f64> = b.row(s).iter().map(|x| x.clamp(0.0, 1.0)).collect();
        recurrence_row(behavior.row(s), &clamped)
    });
    Ok((rows.concat(), b))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves `p = F(p)`, where `F` applies the stationarity map to every state
/// row using clamped true backups of `p`.
///
/// Starts from `p = pi_b` with damped sweeps `p <- (1 - d) p + d F(p)`; the
/// undamped map can settle into a 2-cycle. Each sweep is Jacobi style, so
/// parallel and sequential sweeps agree bit for bit.
///
/// Some fixed points sit where ratios tie (a fully clamped row reproduces
/// `pi_b` exactly, so all its ratios equal 1) and damped sweeps then wander
/// around them. If the residual stops halving over `STALL_WINDOW` sweeps the
/// solver switches to Newton continuation: `max` becomes `tau * logsumexp(x / tau)`
/// and the clamp a softplus with the same `tau`, and `tau` shrinks stage by
/// stage before a final Newton polish on the exact map. Where the smoothed
/// branch folds, pseudo-arclength tracking carries it past the turn.
///
/// On random MDPs a small fraction (about 1 in 4000 in our scans) still ends
/// in `NotConverged`.
pub fn fixed_point_iterate(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    opts: &FixedPointOptions,
) -> Result<FixedPoint, TabularError> {
    if mdp.num_actions() < 2 {
        return Err(TabularError::SingleAction);
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) || !(opts.tol > 0.0) || !(opts.ratio_floor > 0.0) {
        return Err(TabularError::Options(format!("{opts:?}")));
    }
    let mut p = LikelihoodTable::from_policy(behavior);
    check_dims(&p, behavior, mdp)?;
    let done = |p: LikelihoodTable, b: QTable, iterations, residual, solver| {
        let clamp_active = b.values().iter().any(|x| !(0.0..=1.0).contains(x));
        FixedPoint { likelihood: p, backups: b, iterations, residual, solver, clamp_active }
    };
    let mut checkpoint = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iters {
        it += 1;
        let (f, b) = apply_map(&p, behavior, mdp, opts)?;
        residual = sup_diff(&f, &p.probs);
        if residual <= opts.tol {
            return Ok(done(p, b, it, residual, Solver::Damped));
        }
        if it % STALL_WINDOW == 0 {
            if residual > 0.5 * checkpoint {
                break;
            }
            checkpoint = residual;
        }
        p.probs = p.probs.iter().zip(&f).map(|(old, fx)| (1.0 - opts.damping) * old + opts.damping * fx).collect();
    }
    if it >= opts.max_iters {
        return Err(TabularError::NotConverged { iterations: it, residual });
    }
    // The smoothed solution branch can fold back before tau reaches 0, so
    // continuation is retried from the damped iterate, pi_b and uniform rows.
    let na = mdp.num_actions();
    let starts = [
        p.probs.clone(),
        behavior.probs().to_vec(),
        vec![1.0 / na as f64; p.probs.len()],
    ];
    for start in starts {
        if it >= opts.max_iters {
            break;
        }
        let mut q = LikelihoodTable { probs: start, ..p.clone() };
        let (used, mut stuck) = continuation(&mut q, behavior, mdp, opts, 0.5, opts.max_iters - it)?;
        it += used;
        // a few folds at most in practice
        for _ in 0..4 {
            let Some((at, tau)) = stuck.filter(|_| it < opts.max_iters) else { break };
            let mut r = at;
            let (used, past) = track_fold(&mut r, behavior, mdp, opts, tau, opts.max_iters - it)?;
            if past.is_some() {
                q = r;
            }
            it += used;
            let Some(tau) = past.filter(|_| it < opts.max_iters) else { break };
            let (used, again) = continuation(&mut q, behavior, mdp, opts, tau, opts.max_iters - it)?;
            it += used;
            stuck = again;
        }
        let (f, b) = apply_map(&q, behavior, mdp, opts)?;
        residual = sup_diff(&f, &q.probs);
        if residual <= opts.tol {
            return Ok(done(q, b, it, residual, Solver::Newton));
        }
    }
    Err(TabularError::NotConverged { iterations: it, residual })
}

/// Newton solves along a shrinking `tau`; a stage that misses its target
/// restarts from the last solved point with a gentler shrink factor. Ends
/// with a polish on the exact map. Returns the iterations spent and, when
/// shrinking stalled, the last smoothed solution with its tau.
fn continuation(
    p: &mut LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    opts: &FixedPointOptions,
    start_tau: f64,
    budget: usize,
) -> Result<(usize, Option<(LikelihoodTable, f64)>), TabularError> {
    let mut it = 0;
    let mut tau = start_tau;
    let mut stuck = None;
    let mut shrink: f64 = 0.5;
    let mut good = (p.clone(), f64::INFINITY);
    while tau > opts.tol * 1e-2 && it < budget {
        let (used, solved) = newton_solve(p, behavior, mdp, opts, Some(tau), (budget - it).min(NEWTON_ITERS))?;
        it += used;
        if solved {
            good = (p.clone(), tau);
            shrink = (shrink * shrink).max(0.1);
        } else if good.1.is_finite() && shrink < 0.95 {
            *p = good.0.clone();
            shrink = shrink.sqrt();
        } else if good.1.is_finite() {
            stuck = Some(good.clone());
            break;
        } else {
            // the first stage failed; keep its iterate and tighten anyway
            good = (p.clone(), tau);
        }
        tau = good.1 * shrink;
    }
    *p = good.0;
    it += newton_solve(p, behavior, mdp, opts, None, budget.saturating_sub(it).min(NEWTON_ITERS))?.0;
    Ok((it, stuck))
}

/// Pseudo-arclength tracking of `F_tau(p) = p` in `(p, ln tau)` from a solved
/// point at `tau`, used to get around a fold of the solution branch. Stops
/// once the branch is below `tau / 20`, returning that tau.
fn track_fold(
    p: &mut LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    opts: &FixedPointOptions,
    tau: f64,
    budget: usize,
) -> Result<(usize, Option<f64>), TabularError> {
    use nalgebra::{DMatrix, DVector};

    let n = p.probs.len();
    let floor = opts.ratio_floor;
    // Residual and augmented Jacobian [dH/dp | dH/dlam] at (q, lam).
    let eval = |q: &LikelihoodTable, lam: f64| -> Result<(DVector<f64>, DMatrix<f64>), TabularError> {
        let (f, jac) = map_with_jacobian(q, behavior, mdp, floor, Some(lam.exp()))?;
        let h = DVector::from_iterator(n, f.iter().zip(&q.probs).map(|(a, b)| a - b));
        let d = 1e-6;
        let (fp, _) = map_with_jacobian(q, behavior, mdp, floor, Some((lam + d).exp()))?;
        let (fm, _) = map_with_jacobian(q, behavior, mdp, floor, Some((lam - d).exp()))?;
        let mut aug = DMatrix::zeros(n, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(jac - DMatrix::identity(n, n)));
        for i in 0..n {
            aug[(i, n)] = (fp[i] - fm[i]) / (2.0 * d);
        }
        Ok((h, aug))
    };
    let stop = (tau / 20.0).ln();
    let start_lam = tau.ln();
    let mut x = DVector::from_iterator(n + 1, p.probs.iter().copied().chain([tau.ln()]));
    let mut dir = DVector::zeros(n + 1);
    dir[n] = -1.0;
    let mut it = 0;
    let mut h = 0.05;
    while it < budget && h > 1e-10 {
        let q = LikelihoodTable { probs: x.as_slice()[..n].to_vec(), ..p.clone() };
        let (_, aug) = eval(&q, x[n])?;
        it += 1;
        let mut sys = aug.clone().insert_row(n, 0.0);
        sys.row_mut(n).copy_from(&dir.transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs[n] = 1.0;
        let Some(t) = sys.lu().solve(&rhs) else { return Ok((it, None)) };
        let t = t.normalize();
        // Corrector on H = 0 within the hyperplane orthogonal to t.
        let pred = &x + h * &t;
        let mut y = pred.clone();
        let mut ok = false;
        for _ in 0..8 {
            let q = LikelihoodTable { probs: y.as_slice()[..n].to_vec(), ..p.clone() };
            let (res, aug) = eval(&q, y[n])?;
            it += 1;
            // same accuracy the continuation stages ask for
            if res.amax() <= (y[n].exp() * 1e-2).max(opts.tol) {
                ok = true;
                break;
            }
            let mut sys = aug.insert_row(n, 0.0);
            sys.row_mut(n).copy_from(&t.transpose());
            let mut rhs = -res.insert_row(n, 0.0);
            rhs[n] = -t.dot(&(&y - &pred));
            let Some(step) = sys.lu().solve(&rhs) else { break };
            y += step;
        }
        if !ok || (&y - &x).norm() > 2.0 * h {
            h *= 0.5;
            continue;
        }
        dir = t;
        x = y;
        h = (h * 1.5).min(0.5);
        if x[n] > start_lam + 2.0 {
            // turned back up the branch it came from
            return Ok((it, None));
        }
        if x[n] < stop {
            p.probs = x.as_slice()[..n].to_vec();
            return Ok((it, Some(x[n].exp())));
        }
    }
    Ok((it, None))
}

/// `F_tau(p)` and its Jacobian. `tau = None` is the exact map with the
/// argmax selection and clamp indicator as its generalized derivative.
fn map_with_jacobian(
    p: &LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    floor: f64,
    tau: Option<f64>,
) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>), TabularError> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let k = (na - 1) as f64;
    // Successor value and d value / d p(s', a') per state.
    let mut value = vec![0.0; ns];
    let mut dvalue = vec![0.0; ns * na];
    for s in (0..ns).filter(|&s| !mdp.is_terminal(s)) {
        let (pr, pi) = (p.row(s), behavior.row(s));
        let best = argmax_ratio(pr, pi, floor)
            .ok_or(TabularError::NoSupportedAction { state: Obs::State(s), floor })?;
        let top = pr[best] / pi[best];
        match tau {
            None => {
                value[s] = top;
                dvalue[s * na + best] = 1.0 / pi[best];
            }
            Some(t) => {
                let mut z = 0.0;
                for a in (0..na).filter(|&a| pi[a] >= floor) {
                    let w = ((pr[a] / pi[a] - top) / t).exp();
                    dvalue[s * na + a] = w;
                    z += w;
                }
                value[s] = top + t * z.ln();
                for a in 0..na {
                    dvalue[s * na + a] /= z * pi[a];
                }
            }
        }
    }
    let mut f = Vec::with_capacity(ns * na);
    let mut jac = nalgebra::DMatrix::<f64>::zeros(ns * na, ns * na);
    for s in 0..ns {
        let pi = behavior.row(s);
        let mut clamped = vec![0.0; na];
        let mut slope = vec![0.0; na];
        for a in 0..na {
            let mut raw = mdp.reward(s, a);
            if !mdp.is_terminal(s) {
                raw += mdp.discount() * mdp.next_dist(s, a).iter().zip(&value).map(|(x, v)| x * v).sum::<f64>();
            }
            (clamped[a], slope[a]) = match tau {
                None if raw > 0.0 && raw < 1.0 => (raw, 1.0),
                None => (raw.clamp(0.0, 1.0), 0.0),
                // min(raw, 1) = raw - relu(raw - 1), with relu smoothed
                Some(t) => {
                    let x = (raw - 1.0) / t;
                    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
                    ((raw - t * softplus).max(0.0), 1.0 / (1.0 + x.exp()))
                }
            };
        }
        f.extend(recurrence_row(pi, &clamped));
        if mdp.is_terminal(s) {
            continue;
        }
        for a2 in 0..na {
            if slope[a2] == 0.0 {
                continue;
            }
            for (s_next, pr) in mdp.next_dist(s, a2).iter().enumerate() {
                if *pr == 0.0 || mdp.is_terminal(s_next) {
                    continue;
                }
                for a_next in 0..na {
                    let d = dvalue[s_next * na + a_next];
                    if d == 0.0 {
                        continue;
                    }
                    let dbdp = slope[a2] * mdp.discount() * pr * d;
                    for a in 0..na {
                        let dfdb = if a == a2 { pi[a] * (1.0 + 1.0 / k) } else { 0.0 } - pi[a2] / k;
                        jac[(s * na + a, s_next * na + a_next)] += dfdb * dbdp;
                    }
                }
            }
        }
    }
    Ok((f, jac))
}

/// Backtracking Newton on `G(p) = F_tau(p) - p` with the L2 norm of `G` as
/// merit. Returns the iterations spent and whether the stage target was met.
fn newton_solve(
    p: &mut LikelihoodTable,
    behavior: &TabularPolicy,
    mdp: &TabularMdp,
    opts: &FixedPointOptions,
    tau: Option<f64>,
    budget: usize,
) -> Result<(usize, bool), TabularError> {
    use nalgebra::{DMatrix, DVector};

    let n = p.probs.len();
    let merit = |f: &[f64], q: &[f64]| f.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    for used in 0..budget {
        let (f, jac) = map_with_jacobian(p, behavior, mdp, opts.ratio_floor, tau)?;
        let g = DVector::from_iterator(n, f.iter().zip(&p.probs).map(|(fx, px)| fx - px));
        let target = tau.map_or(opts.tol, |t| (t * 1e-2).max(opts.tol));
        if g.amax() <= target {
            return Ok((used, true));
        }
        let Some(delta) = (DMatrix::identity(n, n) - jac).lu().solve(&g) else {
            return Ok((used, false));
        };
        let m0 = g.norm_squared();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = p.probs.iter().zip(delta.iter()).map(|(x, d)| (x + t * d).clamp(0.0, 1.0)).collect();
            let trial = LikelihoodTable { probs: cand, ..p.clone() };
            let (f2, _) = map_with_jacobian(&trial, behavior, mdp, opts.ratio_floor, tau)?;
            if merit(&f2, &trial.probs) < (1.0 - 1e-4 * t) * m0 {
                *p = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok((used + 1, false));
        }
    }
    Ok((budget, false))
}

/// Index of the best supported ratio, lowest id on ties.
fn argmax_ratio(p: &[f64], behavior: &[f64], floor: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, (pa, ba)) in p.iter().zip(behavior).enumerate() {
        if *ba >= floor {
            let r = pa / ba;
            if best.is_none_or(|(_, v)| r > v) {
                best = Some((a, r));
            }
        }
    }
    best.map(|(a, _)| a)
}

/// Sample-based backup targets for a batch, clamped to `[0, 1]`. Done
/// transitions do not bootstrap.
pub fn empirical_backup(
    batch: &[Transition],
    target: &dyn ProbabilityModel,
    behavior: &dyn ProbabilityModel,
    gamma: f64,
    ratio_floor: f64,
) -> Result<Vec<f64>, TabularError> {
    let next: Vec<&Obs> = batch.iter().filter(|t| !t.done).map(|t| &t.next_state).collect();
    let (p, pb) = if next.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (target.probs_batch(&next)?, behavior.probs_batch(&next)?)
    };
    let mut k = 0;
    batch
        .iter()
        .map(|t| {
            let mut y = t.reward;
            if !t.done {
                let m = max_ratio(&p[k], &pb[k], ratio_floor)
                    .ok_or_else(|| TabularError::NoSupportedAction { state: t.next_state.clone(), floor: ratio_floor })?;
                k += 1;
                y += gamma * m;
            }
            Ok(y.clamp(0.0, 1.0))
        })
        .collect()
}

/// `pi(a) ∝ pi_phi(a) exp(beta p(a))`, evaluated in log space.
pub fn extract_row(behavior: &[f64], p: &[f64], beta: f64) -> Vec<f64> {
    let logits: Vec<f64> = behavior.iter().zip(p).map(|(b, q)| b.ln() + beta * q).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn check_beta(beta: f64) -> Result<(), TabularError> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(TabularError::Options(format!("beta {beta} must be finite and >= 0")))
    }
}

/// Materialized extraction over a whole table.
pub fn extract_policy(p: &LikelihoodTable, behavior: &TabularPolicy, beta: f64) -> Result<TabularPolicy, TabularError> {
    check_beta(beta)?;
    if (p.num_states, p.num_actions) != (behavior.num_states(), behavior.num_actions()) {
        return Err(TabularError::Shape("likelihood and behavior tables differ".into()));
    }
    let probs = (0..p.num_states).flat_map(|s| extract_row(behavior.row(s), p.row(s), beta)).collect();
    Ok(TabularPolicy::new(p.num_states, p.num_actions, probs)?)
}

/// Extraction computed lazily at query time from any two models.
pub struct ExtractedPolicy<L, B> {
    likelihood: L,
    behavior: B,
    beta: f64,
}

impl<L: ProbabilityModel, B: ProbabilityModel> ExtractedPolicy<L, B> {
    pub fn new(likelihood: L, behavior: B, beta: f64) -> Result<Self, TabularError> {
        check_beta(beta)?;
        if likelihood.num_actions() != behavior.num_actions() {
            return Err(TabularError::Shape("likelihood and behavior action counts differ".into()));
        }
        Ok(Self { likelihood, behavior, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl<L: ProbabilityModel, B: ProbabilityModel> ProbabilityModel for ExtractedPolicy<L, B> {
    fn num_actions(&self) -> usize {
        self.likelihood.num_actions()
    }

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let p = self.likelihood.probs_batch(states)?;
        let b = self.behavior.probs_batch(states)?;
        Ok(p.iter().zip(&b).map(|(p, b)| extract_row(b, p, self.beta)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundRecord {
    pub state: usize,
    pub action: usize,
    pub q_star: f64,
    pub p_hat: f64,
    pub behavior_prob: f64,
    /// `pi_b(a|s) * Q*(s, a)`.
    pub lower: f64,
    /// Clamped backup at the fixed point.
    pub backup: f64,
    /// `Q*(s, a) >= 1 / (|A| - 1)`.
    pub qualifies: bool,
    /// Same threshold applied to the fixed-point backup instead of `Q*`.
    pub backup_qualifies: bool,
    pub upper_ok: bool,
    pub lower_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub tol: f64,
    pub threshold: f64,
    pub records: Vec<BoundRecord>,
    pub checked_states: usize,
    pub qualifying: usize,
    pub upper_violations: usize,
    pub lower_violations: usize,
    /// Lower-bound failures over every checked pair, qualifying or not.
    pub lower_violations_all: usize,
    /// Largest amount by which a qualifying pair misses either bound.
    pub max_violation: f64,
    pub max_row_sum_error: f64,
    pub clamp_active: bool,
    pub fixed_point_iterations: usize,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.upper_violations == 0 && self.lower_violations == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>3} {:>9} {:>9} {:>9} {:>9} {:>5} {:>5} {:>5}",
            "state", "a", "Q*", "p_hat", "pi_b*Q*", "backup", "qual", "upper", "lower"
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:>5} {:>3} {:>9.6} {:>9.6} {:>9.6} {:>9.6} {:>5} {:>5} {:>5}",
                r.state,
                r.action,
                r.q_star,
                r.p_hat,
                r.lower,
                r.backup,
                yes_no(r.qualifies),
                yes_no(r.upper_ok),
                yes_no(r.lower_ok)
            );
        }
        let _ = writeln!(
            out,
            "qualifying {} / {}, upper violations {}, lower violations {} (all pairs: {}), max violation {:.3e}",
            self.qualifying,
            self.records.len(),
            self.upper_violations,
            self.lower_violations,
            self.lower_violations_all,
            self.max_violation
        );
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "NO"
    }
}

/// Compares the fixed point with `Q*` on the given states: for pairs with
/// `Q* >= 1/(|A|-1)` it checks `Q* + tol >= p_hat >= pi_b Q* - tol`, and it
/// checks the lower bound alone on every pair.
pub fn verify_bounds(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    states: &[usize],
    tol: f64,
    opts: &FixedPointOptions,
) -> Result<BoundReport, TabularError> {
    if !(tol >= 0.0) {
        return Err(TabularError::Options(format!("tol {tol} must be >= 0")));
    }
    let q = value_iteration(mdp, 1e-13, 1_000_000)?;
    let fp = fixed_point_iterate(mdp, behavior, opts)?;
    let na = mdp.num_actions();
    let threshold = 1.0 / (na - 1) as f64;
    let mut states: Vec<usize> = states.to_vec();
    states.sort_unstable();
    states.dedup();
    if let Some(&s) = states.iter().find(|&&s| s >= mdp.num_states()) {
        return Err(TabularError::Shape(format!("state {s} out of range")));
    }
    let mut report = BoundReport {
        num_states: mdp.num_states(),
        num_actions: na,
        discount: mdp.discount(),
        tol,
        threshold,
        records: Vec::with_capacity(states.len() * na),
        checked_states: states.len(),
        qualifying: 0,
        upper_violations: 0,
        lower_violations: 0,
        lower_violations_all: 0,
        max_violation: 0.0,
        max_row_sum_error: fp.likelihood.max_row_sum_error(),
        clamp_active: fp.clamp_active,
        fixed_point_iterations: fp.iterations,
        warnings: Vec::new(),
    };
    for &s in &states {
        for a in 0..na {
            let q_star = q.get(s, a);
            let p_hat = fp.likelihood.get(s, a);
            let behavior_prob = behavior.prob(s, a);
            let lower = behavior_prob * q_star;
            let backup = fp.backups.get(s, a).clamp(0.0, 1.0);
            let qualifies = q_star >= threshold;
            let upper_ok = q_star + tol >= p_hat;
            let lower_ok = p_hat + tol >= lower;
            if !lower_ok {
                report.lower_violations_all += 1;
            }
            if qualifies {
                report.qualifying += 1;
                report.upper_violations += !upper_ok as usize;
                report.lower_violations += !lower_ok as usize;
                report.max_violation = report.max_violation.max(p_hat - q_star).max(lower - p_hat);
            }
            report.records.push(BoundRecord {
                state: s,
                action: a,
                q_star,
                p_hat,
                behavior_prob,
                lower,
                backup,
                qualifies,
                backup_qualifies: backup >= threshold,
                upper_ok,
                lower_ok,
            });
        }
    }
    if na == 2 {
        report.warnings.push(
            "with 2 actions the qualification threshold is 1, so only pairs with Q* = 1 are checked".into(),
        );
    }
    if report.clamp_active {
        report.warnings.push("some backups at the fixed point lie outside [0, 1] and were clamped".into());
    }
    Ok(report)
}

/// Random-MDP suite parameters. MDP `i` draws its size, action count and
/// discount from RNG stream `i` of `base_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub num_mdps: usize,
    pub base_seed: u64,
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub discounts: Vec<f64>,
    /// Successors per `(s, a)`, capped by the state count.
    pub branching: usize,
    pub behavior_floor: f64,
    /// Behavior-policy episodes that define the covered states.
    pub coverage_episodes: usize,
    pub tol: f64,
    pub fixed_point: FixedPointOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            num_mdps: 100,
            base_seed: 0,
            min_states: 3,
            max_states: 20,
            min_actions: 3,
            max_actions: 5,
            discounts: vec![0.9, 0.95],
            branching: 3,
            behavior_floor: DEFAULT_BEHAVIOR_FLOOR,
            coverage_episodes: 20,
            tol: 1e-6,
            fixed_point: FixedPointOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub seed: u64,
    pub state: usize,
    pub action: usize,
    pub kind: BoundKind,
    pub q_star: f64,
    pub p_hat: f64,
    pub behavior_prob: f64,
    pub excess: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteCase {
    pub index: usize,
    pub seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub covered_states: usize,
    pub qualifying: usize,
    pub upper_violations: usize,
    pub lower_violations: usize,
    pub lower_violations_all: usize,
    pub max_violation: f64,
    pub max_row_sum_error: f64,
    pub clamp_active: bool,
    pub fixed_point_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub cases: Vec<SuiteCase>,
    pub violations: Vec<Violation>,
    pub total_pairs_checked: usize,
    pub total_qualifying: usize,
    pub upper_violations: usize,
    pub lower_violations: usize,
    pub lower_violations_all: usize,
    pub max_violation: f64,
    pub max_row_sum_error: f64,
    pub clamp_active_cases: usize,
    /// Cases whose fixed point was not found; they count as failures.
    pub unsolved: Vec<Unsolved>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Unsolved {
    pub index: usize,
    pub seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.unsolved.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>4} {:>20} {:>3} {:>2} {:>5} {:>7} {:>4} {:>5} {:>5} {:>10} {:>5}",
            "idx", "seed", "S", "A", "gamma", "covered", "qual", "upper", "lower", "max_viol", "clamp"
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:>4} {:>20} {:>3} {:>2} {:>5} {:>7} {:>4} {:>5} {:>5} {:>10.3e} {:>5}",
                c.index,
                c.seed,
                c.num_states,
                c.num_actions,
                c.discount,
                c.covered_states,
                c.qualifying,
                c.upper_violations,
                c.lower_violations,
                c.max_violation,
                if c.clamp_active { "yes" } else { "no" }
            );
        }
        let _ = writeln!(
            out,
            "{} MDPs, {} qualifying pairs of {}, upper violations {}, lower violations {} (all pairs: {}), \
             max violation {:.3e}, max row-sum error {:.1e}, clamp active in {} MDPs",
            self.cases.len(),
            self.total_qualifying,
            self.total_pairs_checked,
            self.upper_violations,
            self.lower_violations,
            self.lower_violations_all,
            self.max_violation,
            self.max_row_sum_error,
            self.clamp_active_cases
        );
        for v in &self.violations {
            let _ = writeln!(
                out,
                "violation: seed {} state {} action {} {:?} bound, Q* {:.6} p_hat {:.6} pi_b {:.4} excess {:.3e}",
                v.seed, v.state, v.action, v.kind, v.q_star, v.p_hat, v.behavior_prob, v.excess
            );
        }
        for u in &self.unsolved {
            let _ = writeln!(
                out,
                "unsolved: index {} seed {} S {} A {} gamma {}, residual {:.3e} after {} iterations",
                u.index, u.seed, u.num_states, u.num_actions, u.discount, u.residual, u.iterations
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

impl SuiteConfig {
    /// Rejects empty ranges, discounts outside [0, 1) and negative tolerances.
    pub fn validate(&self) -> Result<(), TabularError> {
        let cfg = self;
        let bad = |m: &str| Err(TabularError::Options(m.into()));
        if cfg.num_mdps == 0 {
            return bad("num_mdps must be positive");
        }
        if cfg.min_states == 0 || cfg.min_states > cfg.max_states {
            return bad("state range is empty");
        }
        if cfg.min_actions < 2 || cfg.min_actions > cfg.max_actions {
            return bad("action range must lie within 2..");
        }
        if cfg.discounts.is_empty() || cfg.discounts.iter().any(|g| !(0.0..1.0).contains(g)) {
            return bad("discounts must be non-empty and in [0, 1)");
        }
        if !(cfg.tol >= 0.0) {
            return bad("tol must be >= 0");
        }
        if cfg.branching == 0 {
            return bad("branching must be positive");
        }
        Ok(())
    }
}

/// Runs [`verify_bounds`] on `cfg.num_mdps` random MDPs. Cases run in
/// parallel under `exec`; the report lists cases in index order.
pub fn run_bound_suite(cfg: &SuiteConfig, exec: Exec) -> Result<SuiteReport, TabularError> {
    cfg.validate()?;
    let results = try_map_indexed(exec, cfg.num_mdps, |i| run_case(cfg, i))?;
    let mut report = SuiteReport {
        config: cfg.clone(),
        cases: Vec::with_capacity(results.len()),
        violations: Vec::new(),
        total_pairs_checked: 0,
        total_qualifying: 0,
        upper_violations: 0,
        lower_violations: 0,
        lower_violations_all: 0,
        max_violation: 0.0,
        max_row_sum_error: 0.0,
        clamp_active_cases: 0,
        unsolved: Vec::new(),
        warnings: Vec::new(),
    };
    for outcome in results {
        let (case, bounds) = match outcome {
            Ok(solved) => solved,
            Err(u) => {
                report.unsolved.push(u);
                continue;
            }
        };
        report.total_pairs_checked += bounds.records.len();
        report.total_qualifying += case.qualifying;
        report.upper_violations += case.upper_violations;
        report.lower_violations += case.lower_violations;
        report.lower_violations_all += case.lower_violations_all;
        report.max_violation = report.max_violation.max(case.max_violation);
        report.max_row_sum_error = report.max_row_sum_error.max(case.max_row_sum_error);
        report.clamp_active_cases += case.clamp_active as usize;
        for r in bounds.records.iter().filter(|r| r.qualifies) {
            let mut push = |kind, excess| {
                report.violations.push(Violation {
                    seed: case.seed,
                    state: r.state,
                    action: r.action,
                    kind,
                    q_star: r.q_star,
                    p_hat: r.p_hat,
                    behavior_prob: r.behavior_prob,
                    excess,
                })
            };
            if !r.upper_ok {
                push(BoundKind::Upper, r.p_hat - r.q_star);
            }
            if !r.lower_ok {
                push(BoundKind::Lower, r.lower - r.p_hat);
            }
        }
        report.cases.push(case);
    }
    if cfg.min_actions == 2 {
        report.warnings.push(
            "action range includes 2: the qualification threshold 1/(|A|-1) = 1 leaves almost no pairs to check"
                .into(),
        );
    }
    if report.total_qualifying == 0 {
        report.warnings.push("no pair qualified; the upper bound was never exercised".into());
    }
    Ok(report)
}

type CaseOutcome = Result<(SuiteCase, BoundReport), Unsolved>;

fn run_case(cfg: &SuiteConfig, index: usize) -> Result<CaseOutcome, TabularError> {
    let mut rng = stream_rng(cfg.base_seed, index as u64);
    let num_states = rng.random_range(cfg.min_states..=cfg.max_states);
    let num_actions = rng.random_range(cfg.min_actions..=cfg.max_actions);
    let discount = cfg.discounts[rng.random_range(0..cfg.discounts.len())];
    let seed: u64 = rng.random();
    let branching = cfg.branching.min(num_states);
    let (mdp, behavior) =
        random_mdp_with_floor(num_states, num_actions, branching, discount, seed, cfg.behavior_floor)?;
    let states = covered_states(&mdp, &behavior, seed, cfg.coverage_episodes)?;
    let report = match verify_bounds(&mdp, &behavior, &states, cfg.tol, &cfg.fixed_point) {
        Err(TabularError::NotConverged { iterations, residual }) => {
            return Ok(Err(Unsolved { index, seed, num_states, num_actions, discount, iterations, residual }));
        }
        other => other?,
    };
    let case = SuiteCase {
        index,
        seed,
        num_states,
        num_actions,
        discount,
        covered_states: states.len(),
        qualifying: report.qualifying,
        upper_violations: report.upper_violations,
        lower_violations: report.lower_violations,
        lower_violations_all: report.lower_violations_all,
        max_violation: report.max_violation,
        max_row_sum_error: report.max_row_sum_error,
        clamp_active: report.clamp_active,
        fixed_point_iterations: report.fixed_point_iterations,
    };
    Ok(Ok((case, report)))
}

/// States visited as decision points by behavior-policy episodes; every
/// state when `episodes` is 0.
fn covered_states(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    seed: u64,
    episodes: usize,
) -> Result<Vec<usize>, TabularError> {
    if episodes == 0 {
        return Ok((0..mdp.num_states()).collect());
    }
    let spec = EnvSpec::RandomMdp {
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        branching: 1,
        discount: mdp.discount(),
        seed,
    };
    // The `EnvSpec` only labels the data; dynamics come from `mdp` itself.
    let model = crate::envs::EnvModel::Tabular(std::sync::Arc::new(crate::envs::TabularModel {
        mdp: mdp.clone(),
        horizon: 50,
        goal: None,
        grid: None,
    }));
    let ds = collect_dataset(&model, &spec, behavior, episodes, seed, Exec::Sequential, serde_json::Value::Null)?;
    let mut seen = vec![false; mdp.num_states()];
    for t in ds.transitions() {
        if let Some(s) = t.state.state_id() {
            seen[s] = true;
        }
    }
    Ok((0..mdp.num_states()).filter(|&s| seen[s]).collect())
}

/// Greedy action of a likelihood row.
pub fn greedy(p: &[f64]) -> usize {
    argmax(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_mdp;
    use crate::mdp::fixtures::terminal_bandit;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn opts() -> FixedPointOptions {
        FixedPointOptions::default()
    }

    /// s0 -> s1 via a0; everything else ends in the absorbing s2.
    fn chain_mdp(r0: f64, discount: f64) -> TabularMdp {
        let (ns, na) = (3, 3);
        let mut t = vec![0.0; ns * na * ns];
        let idx = |s: usize, a: usize, s2: usize| (s * na + a) * ns + s2;
        t[idx(0, 0, 1)] = 1.0;
        for a in 0..na {
            if a > 0 {
                t[idx(0, a, 2)] = 1.0;
            }
            t[idx(1, a, 2)] = 1.0;
            t[idx(2, a, 2)] = 1.0;
        }
        let mut reward = vec![0.0; ns * na];
        reward[na] = r0;
        TabularMdp::new(ns, na, t, reward, vec![false, false, true], vec![1.0, 0.0, 0.0], discount).unwrap()
    }

    #[test]
    fn terminal_bandit_backup_is_reward() {
        let mdp = terminal_bandit(&[0.9, 0.5, 0.1], 0.95);
        let pi = TabularPolicy::uniform(2, 3);
        let b = true_backup(&LikelihoodTable::from_policy(&pi), &pi, &mdp, 1e-3).unwrap();
        assert_eq!(b.row(0), &[0.9, 0.5, 0.1]);
        assert_eq!(b.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ratio_identity_backup() {
        // p = pi_b: every successor ratio is 1.
        let mdp = chain_mdp(0.0, 0.9);
        let pi = TabularPolicy::uniform(3, 3);
        let b = true_backup(&LikelihoodTable::from_policy(&pi), &pi, &mdp, 1e-3).unwrap();
        assert_abs_diff_eq!(b.get(0, 0), 0.9, epsilon = 1e-15);
        assert_eq!(b.get(0, 1), 0.0);
    }

    #[test]
    fn backup_hand_value() {
        // r = 0.2 into s1, where the best supported ratio is 0.3 / 0.5 = 0.6.
        let mdp = {
            let (ns, na) = (3, 2);
            let mut t = vec![0.0; ns * na * ns];
            let idx = |s: usize, a: usize, s2: usize| (s * na + a) * ns + s2;
            t[idx(0, 0, 1)] = 1.0;
            t[idx(0, 1, 2)] = 1.0;
            for a in 0..na {
                t[idx(1, a, 2)] = 1.0;
                t[idx(2, a, 2)] = 1.0;
            }
            let reward = vec![0.2, 0.0, 0.0, 0.0, 0.0, 0.0];
            TabularMdp::new(ns, na, t, reward, vec![false, false, true], vec![1.0, 0.0, 0.0], 0.9).unwrap()
        };
        let pi = TabularPolicy::new(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let p = LikelihoodTable::new(3, 2, vec![0.5, 0.5, 0.3, 0.2, 0.5, 0.5]).unwrap();
        let b = true_backup(&p, &pi, &mdp, 1e-3).unwrap();
        assert_abs_diff_eq!(b.get(0, 0), 0.74, epsilon = 1e-12);
    }

    #[test]
    fn floor_excludes_rare_actions_and_errors_without_support() {
        assert_eq!(max_ratio(&[0.5, 0.01], &[0.9995, 0.0005], 1e-3), Some(0.5 / 0.9995));
        assert_eq!(max_ratio(&[0.5, 0.5], &[0.0005, 0.0005], 1e-3), None);
        let mdp = chain_mdp(0.5, 0.9);
        let pi = TabularPolicy::uniform(3, 3);
        let p = LikelihoodTable::from_policy(&pi);
        let err = true_backup(&p, &pi, &mdp, 0.5).unwrap_err();
        assert!(matches!(err, TabularError::NoSupportedAction { state: Obs::State(0), .. }));
    }

    #[test]
    fn three_action_bandit_fixed_point() {
        let mdp = terminal_bandit(&[0.9, 0.5, 0.1], 0.95);
        let fp = fixed_point_iterate(&mdp, &TabularPolicy::uniform(2, 3), &opts()).unwrap();
        let row = fp.likelihood.row(0);
        assert_abs_diff_eq!(row[0], 8.0 / 15.0, epsilon = 1e-10);
        assert_abs_diff_eq!(row[1], 1.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(row[2], 2.0 / 15.0, epsilon = 1e-10);
        assert!(fp.likelihood.max_row_sum_error() <= 1e-12);
        assert!(!fp.clamp_active);
    }

    #[test]
    fn two_action_bandit_fixed_point() {
        let mdp = terminal_bandit(&[1.0, 0.0], 0.9);
        let fp = fixed_point_iterate(&mdp, &TabularPolicy::uniform(2, 2), &opts()).unwrap();
        assert_abs_diff_eq!(fp.likelihood.get(0, 0), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fp.likelihood.get(0, 1), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_reward_fixed_point() {
        // All backups are 0, so p(a) = sum_{a' != a} pi(a') / (|A| - 1).
        let mdp = terminal_bandit(&[0.0, 0.0, 0.0], 0.9);
        let pi = TabularPolicy::new(2, 3, vec![0.2, 0.3, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let fp = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
        for (a, expect) in [0.4, 0.35, 0.25].into_iter().enumerate() {
            assert_abs_diff_eq!(fp.likelihood.get(0, a), expect, epsilon = 1e-12);
            assert_abs_diff_eq!(fp.likelihood.get(1, a), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn solution_satisfies_recurrence() {
        let (mdp, pi) = random_mdp(9, 4, 3, 0.95, 21).unwrap();
        let fp = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
        for s in 0..9 {
            let b: Vec<f64> = fp.backups.row(s).iter().map(|x| x.clamp(0.0, 1.0)).collect();
            let f = recurrence_row(pi.row(s), &b);
            assert_abs_diff_eq!(fp.likelihood.row(s), f.as_slice(), epsilon = 1e-10);
        }
    }

    #[test]
    fn single_action_rejected() {
        let mdp = terminal_bandit(&[0.5], 0.9);
        assert!(matches!(
            fixed_point_iterate(&mdp, &TabularPolicy::uniform(2, 1), &opts()),
            Err(TabularError::SingleAction)
        ));
    }

    #[test]
    fn plain_recurrence_can_oscillate() {
        let (mdp, pi) = random_mdp(12, 4, 3, 0.95, 0).unwrap();
        let plain = FixedPointOptions { damping: 1.0, max_iters: 5_000, ..opts() };
        let damped = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
        match fixed_point_iterate(&mdp, &pi, &plain) {
            Ok(fp) => assert_abs_diff_eq!(fp.likelihood.probs(), damped.likelihood.probs(), epsilon = 1e-9),
            Err(TabularError::NotConverged { residual, .. }) => assert!(residual > 1e-12),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let (mdp, pi) = random_mdp(15, 5, 3, 0.9, 8).unwrap();
        let a = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
        let b = fixed_point_iterate(&mdp, &pi, &FixedPointOptions { exec: Exec::Parallel, ..opts() }).unwrap();
        assert_eq!(a.likelihood, b.likelihood);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn empirical_backup_examples() {
        let t = |r: f64, done: bool| Transition {
            traj_id: 0,
            step_index: 0,
            state: Obs::State(0),
            action: 0,
            reward: r,
            next_state: Obs::State(1),
            done,
        };
        let target = LikelihoodTable::new(2, 2, vec![0.5, 0.5, 0.2, 0.4]).unwrap();
        let behavior = TabularPolicy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = empirical_backup(&[t(1.0, true), t(0.0, true), t(0.0, false)], &target, &behavior, 0.95, 1e-3).unwrap();
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 0.0);
        assert_abs_diff_eq!(y[2], 0.76, epsilon = 1e-12);
        // Bootstrap above 1 is clamped.
        let y = empirical_backup(&[t(0.5, false)], &target, &behavior, 0.95, 1e-3).unwrap();
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn extraction_examples() {
        let p = LikelihoodTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        let pi = TabularPolicy::uniform(1, 2);
        let e = std::f64::consts::E;
        let x = extract_policy(&p, &pi, 1.0).unwrap();
        assert_abs_diff_eq!(x.prob(0, 0), e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(x.prob(0, 1), 1.0 / (e + 1.0), epsilon = 1e-15);
        assert_eq!(extract_policy(&p, &pi, 0.0).unwrap(), pi);
        let big = extract_policy(&p, &pi, 1e4).unwrap();
        assert_eq!(big.row(0), &[1.0, 0.0]);
        assert!(extract_policy(&p, &pi, -1.0).is_err());
        let lazy = ExtractedPolicy::new(p.clone(), pi.clone(), 1.0).unwrap();
        assert_eq!(lazy.probs(&Obs::State(0)).unwrap(), x.row(0));
    }

    #[test]
    fn bandit_bound_report() {
        let mdp = terminal_bandit(&[0.9, 0.5, 0.1], 0.95);
        let r = verify_bounds(&mdp, &TabularPolicy::uniform(2, 3), &[0], 1e-6, &opts()).unwrap();
        assert_eq!(r.qualifying, 2);
        assert!(r.passed());
        assert_abs_diff_eq!(r.records[0].lower, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.records[1].lower, 0.5 / 3.0, epsilon = 1e-12);
        assert!(!r.records[2].qualifies);
        assert!(r.table().contains("upper violations 0"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["qualifying"], 2);
    }

    #[test]
    fn zero_reward_report_is_vacuous() {
        let mdp = terminal_bandit(&[0.0, 0.0, 0.0], 0.9);
        let r = verify_bounds(&mdp, &TabularPolicy::uniform(2, 3), &[0, 1], 1e-6, &opts()).unwrap();
        assert_eq!(r.qualifying, 0);
        assert_eq!(r.lower_violations_all, 0);
        assert!(r.passed());
    }

    #[test]
    fn two_actions_warn() {
        let mdp = terminal_bandit(&[1.0, 0.0], 0.9);
        let r = verify_bounds(&mdp, &TabularPolicy::uniform(2, 2), &[0], 1e-6, &opts()).unwrap();
        assert_eq!(r.qualifying, 1);
        assert!(r.warnings.iter().any(|w| w.contains("2 actions")));
    }

    #[test]
    fn upper_bound_counterexample() {
        // Q*(s0, a0) = 0.9 * 0.6 = 0.54 qualifies (>= 1/2). A rare best action
        // at s1 makes the ratio 0.505 / 0.05 = 10.1, so B(s0, a0) clamps to 1
        // and p(a0|s0) = 1/3 + (1/3 + 1/3) / 2 = 2/3 > 0.54.
        let mdp = chain_mdp(0.6, 0.9);
        let third = 1.0 / 3.0;
        let pi = TabularPolicy::new(3, 3, vec![third, third, third, 0.05, 0.475, 0.475, third, third, third]).unwrap();
        let r = verify_bounds(&mdp, &pi, &[0, 1], 1e-6, &opts()).unwrap();
        let rec = &r.records[0];
        assert_abs_diff_eq!(rec.q_star, 0.54, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.p_hat, 2.0 / 3.0, epsilon = 1e-10);
        assert!(rec.qualifies && !rec.upper_ok && rec.lower_ok);
        assert_eq!(r.upper_violations, 1);
        assert_eq!(r.lower_violations_all, 0);
        assert!(r.clamp_active);
    }

    #[test]
    fn small_suite_runs_and_is_deterministic() {
        let cfg = SuiteConfig { num_mdps: 6, ..SuiteConfig::default() };
        let a = run_bound_suite(&cfg, Exec::Parallel).unwrap();
        let b = run_bound_suite(&cfg, Exec::Sequential).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.cases.len(), 6);
        assert!(a.max_row_sum_error <= 1e-8);
        assert_eq!(a.lower_violations_all, 0);
        let cfg2 = SuiteConfig { min_actions: 2, max_actions: 2, num_mdps: 2, ..SuiteConfig::default() };
        assert!(!run_bound_suite(&cfg2, Exec::Parallel).unwrap().warnings.is_empty());
        assert!(run_bound_suite(&SuiteConfig { tol: -1.0, ..cfg }, Exec::Parallel).is_err());
    }

    #[test]
    fn raising_a_reward_never_lowers_its_own_likelihood() {
        for seed in 0..10 {
            let (mdp, pi) = random_mdp(8, 3, 2, 0.9, seed).unwrap();
            let base = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
            let q = value_iteration(&mdp, 1e-13, 100_000).unwrap();
            let (s, a) = ((seed as usize) % 8, (seed as usize) % 3);
            let mut rewards = mdp.rewards().to_vec();
            rewards[s * 3 + a] = (rewards[s * 3 + a] + 0.05).min(1.0 - 0.9);
            let bumped = TabularMdp::new(
                8,
                3,
                mdp.transition_tensor().to_vec(),
                rewards,
                vec![false; 8],
                mdp.initial_dist().to_vec(),
                0.9,
            )
            .unwrap();
            let up = fixed_point_iterate(&bumped, &pi, &opts()).unwrap();
            if q.get(s, a) >= 0.5 {
                assert!(up.likelihood.get(s, a) + 1e-9 >= base.likelihood.get(s, a), "seed {seed}");
            }
        }
    }

    #[test]
    fn solver_failures_are_rare() {
        let mut failed = Vec::new();
        for seed in 0..400u64 {
            let ns = 2 + (seed % 10) as usize;
            let na = 2 + (seed % 4) as usize;
            let (mdp, pi) = random_mdp(ns, na, ns.min(3), 0.9, seed).unwrap();
            match fixed_point_iterate(&mdp, &pi, &opts()) {
                Ok(fp) => assert!(fp.residual <= 1e-12),
                Err(TabularError::NotConverged { .. }) => failed.push(seed),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(failed.len() <= 2, "unsolved seeds {failed:?}");
    }

    #[test]
    fn folded_branch_is_tracked() {
        // Damped sweeps stall here and the smoothed branch turns back near
        // tau = 5e-3.
        let (mdp, pi) = random_mdp(13, 4, 3, 0.9, 18467).unwrap();
        let fp = fixed_point_iterate(&mdp, &pi, &opts()).unwrap();
        assert_eq!(fp.solver, Solver::Newton);
        let (f, _) = apply_map(&fp.likelihood, &pi, &mdp, &opts()).unwrap();
        assert!(sup_diff(&f, fp.likelihood.probs()) <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fixed_point_rows_normalize(seed in 0u64..10_000, ns in 2usize..12, na in 2usize..6) {
            let (mdp, pi) = random_mdp(ns, na, ns.min(3), 0.9, seed).unwrap();
            // Rare solver failures are covered by `solver_failures_are_rare`.
            let fp = match fixed_point_iterate(&mdp, &pi, &opts()) {
                Err(TabularError::NotConverged { .. }) => return Ok(()),
                r => r.unwrap(),
            };
            prop_assert!(fp.likelihood.max_row_sum_error() <= 1e-8);
            prop_assert!(fp.likelihood.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn extraction_argmax_matches_likelihood(
            p in proptest::collection::vec(0.0f64..1.0, 2..6),
            beta in 0.01f64..20.0,
        ) {
            let n = p.len();
            let uniform = vec![1.0 / n as f64; n];
            let x = extract_row(&uniform, &p, beta);
            let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(p.iter().filter(|v| **v == top).count() == 1);
            prop_assert_eq!(argmax(&x), argmax(&p));
            prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
