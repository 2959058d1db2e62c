//! Policy rollouts, per-episode reports and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Obs;
use crate::envs::{EnvError, EnvModel, EnvSpec};
use crate::par::{stream_rng, try_map_indexed, Exec};
use crate::policy::{greedy_action, sample_action, EpisodeContext, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n_episodes must be positive")]
    NoEpisodes,
    #[error("policy has {policy} actions, environment has {env}")]
    ActionMismatch { policy: usize, env: usize },
    #[error("episode {episode}: {source}")]
    Policy { episode: usize, source: PolicyError },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("nothing to compare")]
    EmptyComparison,
    #[error("reports come from different environments: {expected} vs {found}")]
    EnvMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Draw each action from the policy's distribution.
    Sample,
    /// Take the most likely action, lowest index on ties.
    Greedy,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Sample => "sample",
            EvalMode::Greedy => "greedy",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sample" => Ok(EvalMode::Sample),
            "greedy" => Ok(EvalMode::Greedy),
            other => Err(format!("unknown mode `{other}` (expected sample or greedy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub discounted_return: f64,
    pub length: usize,
    pub success: Option<bool>,
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregate statistics. Every field is recomputable from the episode list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub policy: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub mean_discounted_return: f64,
    pub stderr_discounted_return: f64,
    pub success_rate: Option<f64>,
}

impl EvalSummary {
    fn from_episodes(env: &str, policy: &str, mode: EvalMode, seed: u64, eps: &[EpisodeResult]) -> Self {
        let rets: Vec<f64> = eps.iter().map(|e| e.ret).collect();
        let disc: Vec<f64> = eps.iter().map(|e| e.discounted_return).collect();
        let (mean_return, stderr_return) = mean_stderr(&rets);
        let (mean_discounted_return, stderr_discounted_return) = mean_stderr(&disc);
        let success_rate = eps
            .iter()
            .map(|e| e.success)
            .collect::<Option<Vec<bool>>>()
            .map(|s| s.iter().filter(|&&x| x).count() as f64 / s.len() as f64);
        EvalSummary {
            env: env.into(),
            policy: policy.into(),
            mode,
            seed,
            episodes: eps.len(),
            mean_return,
            stderr_return,
            mean_discounted_return,
            stderr_discounted_return,
            success_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn new(env: &str, policy: &str, mode: EvalMode, seed: u64, episodes: Vec<EpisodeResult>) -> Self {
        let summary = EvalSummary::from_episodes(env, policy, mode, seed, &episodes);
        EvalReport { summary, episodes }
    }

    /// Statistics recomputed from the episode list.
    pub fn recompute(&self) -> EvalSummary {
        let s = &self.summary;
        EvalSummary::from_episodes(&s.env, &s.policy, s.mode, s.seed, &self.episodes)
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }

    /// One row per episode.
    pub fn write_episodes_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "return", "discounted_return", "length", "success"])?;
        for e in &self.episodes {
            let success = e.success.map(|s| (s as u8).to_string()).unwrap_or_default();
            w.write_record([
                e.episode.to_string(),
                e.ret.to_string(),
                e.discounted_return.to_string(),
                e.length.to_string(),
                success,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// Per-state action counts gathered along rollouts.
pub type VisitCounts = BTreeMap<Obs, Vec<u64>>;

/// Runs `n_episodes` episodes of `policy` in `env`.
///
/// Episode `i` draws from RNG stream `i` under `seed`, so the report does not
/// depend on the executor. The policy sees the step index and the
/// undiscounted return so far.
pub fn rollout(
    env: &EnvSpec,
    policy: &dyn Policy,
    policy_id: &str,
    n_episodes: usize,
    seed: u64,
    mode: EvalMode,
    exec: Exec,
) -> Result<EvalReport, EvalError> {
    let model = env.build()?;
    let runs = run_all(&model, policy, n_episodes, seed, mode, exec, false)?;
    Ok(EvalReport::new(env.name(), policy_id, mode, seed, runs.into_iter().map(|r| r.0).collect()))
}

/// Like [`rollout`] but also returns how often each action was taken at each
/// visited state.
pub fn rollout_with_visits(
    env: &EnvSpec,
    policy: &dyn Policy,
    policy_id: &str,
    n_episodes: usize,
    seed: u64,
    mode: EvalMode,
    exec: Exec,
) -> Result<(EvalReport, VisitCounts), EvalError> {
    let model = env.build()?;
    let runs = run_all(&model, policy, n_episodes, seed, mode, exec, true)?;
    let mut visits = VisitCounts::new();
    let mut episodes = Vec::with_capacity(runs.len());
    for (ep, trail) in runs {
        for (obs, a) in trail {
            visits.entry(obs).or_insert_with(|| vec![0; model.num_actions()])[a] += 1;
        }
        episodes.push(ep);
    }
    Ok((EvalReport::new(env.name(), policy_id, mode, seed, episodes), visits))
}

type Run = (EpisodeResult, Vec<(Obs, usize)>);

fn run_all(
    model: &EnvModel,
    policy: &dyn Policy,
    n: usize,
    seed: u64,
    mode: EvalMode,
    exec: Exec,
    trace: bool,
) -> Result<Vec<Run>, EvalError> {
    if n == 0 {
        return Err(EvalError::NoEpisodes);
    }
    if policy.num_actions() != model.num_actions() {
        return Err(EvalError::ActionMismatch { policy: policy.num_actions(), env: model.num_actions() });
    }
    try_map_indexed(exec, n, |i| run_episode(model, policy, i, seed, mode, trace))
}

fn run_episode(model: &EnvModel, policy: &dyn Policy, i: usize, seed: u64, mode: EvalMode, trace: bool) -> Result<Run, EvalError> {
    let mut rng = stream_rng(seed, i as u64);
    let gamma = model.discount();
    let mut ep = model.episode();
    let mut obs = ep.reset(&mut rng);
    let mut ctx = EpisodeContext::default();
    let (mut disc, mut scale) = (0.0, 1.0);
    let mut trail = Vec::new();
    loop {
        let probs = policy.action_probs(&obs, &ctx).map_err(|source| EvalError::Policy { episode: i, source })?;
        let action = match mode {
            EvalMode::Sample => sample_action(&probs, &mut rng),
            EvalMode::Greedy => greedy_action(&probs),
        };
        let step = ep.step(action, &mut rng)?;
        if trace {
            trail.push((obs, action));
        }
        disc += scale * step.reward;
        scale *= gamma;
        ctx.step += 1;
        ctx.return_so_far += step.reward;
        obs = step.obs;
        if step.done {
            let result = EpisodeResult {
                episode: i,
                ret: ctx.return_so_far,
                discounted_return: disc,
                length: ctx.step,
                success: ep.success(),
            };
            return Ok((result, trail));
        }
    }
}

/// One line of a comparison table; `delta` is the mean-return difference to
/// the first report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub mean_discounted_return: f64,
    pub stderr_discounted_return: f64,
    pub success_rate: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub env: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[EvalSummary]) -> Result<Comparison, EvalError> {
    let first = reports.first().ok_or(EvalError::EmptyComparison)?;
    let rows = reports
        .iter()
        .map(|r| {
            if r.env != first.env {
                return Err(EvalError::EnvMismatch { expected: first.env.clone(), found: r.env.clone() });
            }
            Ok(ComparisonRow {
                policy: r.policy.clone(),
                mode: r.mode,
                seed: r.seed,
                episodes: r.episodes,
                mean_return: r.mean_return,
                stderr_return: r.stderr_return,
                mean_discounted_return: r.mean_discounted_return,
                stderr_discounted_return: r.stderr_discounted_return,
                success_rate: r.success_rate,
                delta: r.mean_return - first.mean_return,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Comparison { env: first.env.clone(), rows })
}

const HEADER: [&str; 10] = [
    "policy",
    "mode",
    "seed",
    "episodes",
    "mean_return",
    "stderr_return",
    "mean_discounted",
    "stderr_discounted",
    "success_rate",
    "delta",
];

impl Comparison {
    fn cells(&self) -> Vec<[String; 10]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.policy.clone(),
                    r.mode.name().into(),
                    r.seed.to_string(),
                    r.episodes.to_string(),
                    format!("{:.4}", r.mean_return),
                    format!("{:.4}", r.stderr_return),
                    format!("{:.4}", r.mean_discounted_return),
                    format!("{:.4}", r.stderr_discounted_return),
                    r.success_rate.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into()),
                    format!("{:+.4}", r.delta),
                ]
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for row in self.cells() {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Column-aligned plain text with `mean ± stderr` cells.
    pub fn to_text(&self) -> String {
        let head = ["policy", "mode", "seed", "episodes", "return", "discounted", "success", "delta"];
        let body: Vec<Vec<String>> = self
            .cells()
            .into_iter()
            .map(|c| {
                vec![
                    c[0].clone(),
                    c[1].clone(),
                    c[2].clone(),
                    c[3].clone(),
                    format!("{} ± {}", c[4], c[5]),
                    format!("{} ± {}", c[6], c[7]),
                    c[8].clone(),
                    c[9].clone(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = format!("env: {}\n", self.env);
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(head.to_vec(), &mut out);
        line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect(), &mut out);
        for row in &body {
            line(row.iter().map(|s| s.as_str()).collect(), &mut out);
        }
        out
    }
}

/// Largest per-state total-variation distance between two visit-count
/// tables, over states both tables visit at least `min_visits` times.
/// Returns `(distance, states compared)`.
pub fn max_state_tv(a: &VisitCounts, b: &VisitCounts, min_visits: u64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (obs, ca) in a {
        let Some(cb) = b.get(obs) else { continue };
        let (na, nb) = (ca.iter().sum::<u64>(), cb.iter().sum::<u64>());
        if na < min_visits || nb < min_visits {
            continue;
        }
        let tv: f64 = ca.iter().zip(cb).map(|(x, y)| (*x as f64 / na as f64 - *y as f64 / nb as f64).abs()).sum::<f64>() / 2.0;
        worst = worst.max(tv);
        compared += 1;
    }
    (worst, compared)
}
