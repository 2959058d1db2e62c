//! Queryable action distributions shared by tabular tables, neural models and
//! rollouts.

use rand::Rng;
use thiserror::Error;

use crate::dataset::Obs;
use crate::mdp::{argmax, TabularPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy undefined at state {0:?}")]
    UndefinedState(Obs),
    #[error("{0}")]
    Model(String),
}

/// Per-episode information some policies condition on.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeContext {
    pub step: usize,
    pub return_so_far: f64,
}

/// Anything that yields an action distribution for a state.
pub trait Policy: Send + Sync {
    fn num_actions(&self) -> usize;
    fn action_probs(&self, obs: &Obs, ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError>;
}

/// Context-free per-state probabilities with a batched query path.
///
/// Implemented by likelihood tables, behavior estimates and softmax models;
/// every implementor is a [`Policy`] as well.
pub trait ProbabilityModel: Send + Sync {
    fn num_actions(&self) -> usize;

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError>;

    fn probs(&self, state: &Obs) -> Result<Vec<f64>, PolicyError> {
        Ok(self.probs_batch(&[state])?.pop().expect("one row per state"))
    }
}

impl<T: ProbabilityModel> Policy for T {
    fn num_actions(&self) -> usize {
        ProbabilityModel::num_actions(self)
    }

    fn action_probs(&self, obs: &Obs, _ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError> {
        self.probs(obs)
    }
}

impl Policy for Box<dyn Policy> {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn action_probs(&self, obs: &Obs, ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError> {
        (**self).action_probs(obs, ctx)
    }
}

impl ProbabilityModel for TabularPolicy {
    fn num_actions(&self) -> usize {
        TabularPolicy::num_actions(self)
    }

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError> {
        states
            .iter()
            .map(|obs| match obs {
                Obs::State(s) if *s < self.num_states() => Ok(self.row(*s).to_vec()),
                other => Err(PolicyError::UndefinedState((*other).clone())),
            })
            .collect()
    }
}

/// Draw an action index from a probability row.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    // Rounding left u above the cumulative sum; take the last supported action.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn greedy_action(probs: &[f64]) -> usize {
    argmax(probs)
}

/// Per-step mixture `w * scripted + (1 - w) * uniform`.
pub struct Mixture<P> {
    pub scripted: P,
    pub weight: f64,
}

impl<P: Policy> Policy for Mixture<P> {
    fn num_actions(&self) -> usize {
        self.scripted.num_actions()
    }

    fn action_probs(&self, obs: &Obs, ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError> {
        let n = self.num_actions() as f64;
        Ok(self
            .scripted
            .action_probs(obs, ctx)?
            .into_iter()
            .map(|p| self.weight * p + (1.0 - self.weight) / n)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn sampling_matches_probabilities() {
        let mut rng = stream_rng(5, 0);
        let probs = [0.2, 0.0, 0.8];
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_action(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        let f = counts[0] as f64 / 20_000.0;
        // 3 sigma at n = 2e4 is about 0.0085
        assert!((f - 0.2).abs() < 0.0085, "{f}");
    }

    #[test]
    fn mixture_rows_are_distributions() {
        let scripted = TabularPolicy::deterministic(4, &[2]);
        let mix = Mixture { scripted, weight: 0.5 };
        let p = mix.action_probs(&Obs::State(0), &EpisodeContext::default()).unwrap();
        assert_eq!(p, vec![0.125, 0.125, 0.625, 0.125]);
        assert!(mix.action_probs(&Obs::State(1), &EpisodeContext::default()).is_err());
    }
}
