//! Toy environments and offline dataset generators.

mod generate;
mod gridworld;
mod random;
mod wordle;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{collect_dataset, rollout_dataset, GeneratorPolicy};
pub use gridworld::{build_gridworld_stitch, gen_stitch_dataset, Cell, StitchGrid, ACTION_NAMES};
pub use random::{random_mdp, random_mdp_with_floor, DEFAULT_BEHAVIOR_FLOOR};
pub use wordle::{feedback, Feedback, MiniWordle, WordleEpisode, WordleSolver};

use crate::dataset::{DatasetError, Obs};
use crate::features::Featurizer;
use crate::mdp::{value_iteration, MdpError, TabularMdp};
use crate::policy::{sample_action, Policy};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    Params(String),
    #[error("invalid action {action} (environment has {num_actions})")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("episode already finished")]
    Finished,
    #[error("n_episodes must be positive")]
    NoEpisodes,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// Reproducible environment description; identical specs build identical
/// environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvSpec {
    GridworldStitch {
        width: usize,
        height: usize,
        discount: f64,
    },
    MiniWordle {
        word_length: usize,
        alphabet: usize,
        max_guesses: usize,
        discount: f64,
    },
    RandomMdp {
        num_states: usize,
        num_actions: usize,
        branching: usize,
        discount: f64,
        seed: u64,
    },
    /// Single decision whose every action ends the episode.
    Bandit { rewards: Vec<f64>, discount: f64 },
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::GridworldStitch { .. } => "gridworld-stitch",
            EnvSpec::MiniWordle { .. } => "mini-wordle",
            EnvSpec::RandomMdp { .. } => "random-mdp",
            EnvSpec::Bandit { .. } => "bandit",
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            EnvSpec::GridworldStitch { discount, .. }
            | EnvSpec::MiniWordle { discount, .. }
            | EnvSpec::RandomMdp { discount, .. }
            | EnvSpec::Bandit { discount, .. } => *discount,
        }
    }

    pub fn build(&self) -> Result<EnvModel, EnvError> {
        Ok(match self {
            EnvSpec::GridworldStitch { width, height, discount } => {
                let grid = build_gridworld_stitch(*width, *height, *discount)?;
                let horizon = 4 * (width + height);
                EnvModel::Tabular(Arc::new(TabularModel {
                    goal: Some(grid.goal_state()),
                    mdp: grid.mdp.clone(),
                    horizon,
                    grid: Some(grid),
                }))
            }
            EnvSpec::MiniWordle { word_length, alphabet, max_guesses, discount } => {
                EnvModel::Wordle(Arc::new(MiniWordle::new(*word_length, *alphabet, *max_guesses, *discount)?))
            }
            EnvSpec::RandomMdp { num_states, num_actions, branching, discount, seed } => {
                let (mdp, _) = random_mdp(*num_states, *num_actions, *branching, *discount, *seed)?;
                EnvModel::Tabular(Arc::new(TabularModel { mdp, horizon: 50, goal: None, grid: None }))
            }
            EnvSpec::Bandit { rewards, discount } => {
                let mdp = bandit_mdp(rewards, *discount)?;
                EnvModel::Tabular(Arc::new(TabularModel { mdp, horizon: 1, goal: None, grid: None }))
            }
        })
    }
}

/// Terminal bandit: state 0 decides, state 1 is absorbing.
pub fn bandit_mdp(rewards: &[f64], discount: f64) -> Result<TabularMdp, MdpError> {
    let na = rewards.len();
    let mut transition = vec![0.0; 2 * na * 2];
    let mut reward = vec![0.0; 2 * na];
    for a in 0..na {
        transition[a * 2 + 1] = 1.0;
        transition[(na + a) * 2 + 1] = 1.0;
        reward[a] = rewards[a];
    }
    TabularMdp::new(2, na, transition, reward, vec![false, true], vec![1.0, 0.0], discount)
}

#[derive(Debug)]
pub struct TabularModel {
    pub mdp: TabularMdp,
    pub horizon: usize,
    /// State whose arrival counts as success, if the task has one.
    pub goal: Option<usize>,
    pub grid: Option<StitchGrid>,
}

/// Immutable, shareable environment dynamics.
#[derive(Debug, Clone)]
pub enum EnvModel {
    Tabular(Arc<TabularModel>),
    Wordle(Arc<MiniWordle>),
}

impl EnvModel {
    pub fn num_actions(&self) -> usize {
        match self {
            EnvModel::Tabular(t) => t.mdp.num_actions(),
            EnvModel::Wordle(w) => w.alphabet(),
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            EnvModel::Tabular(t) => t.mdp.discount(),
            EnvModel::Wordle(w) => w.discount(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvModel::Tabular(t) => t.horizon,
            EnvModel::Wordle(w) => w.horizon(),
        }
    }

    pub fn featurizer(&self) -> Featurizer {
        match self {
            EnvModel::Tabular(t) => Featurizer::OneHotState { num_states: t.mdp.num_states() },
            EnvModel::Wordle(w) => w.featurizer(),
        }
    }

    pub fn tabular(&self) -> Option<&TabularMdp> {
        match self {
            EnvModel::Tabular(t) => Some(&t.mdp),
            EnvModel::Wordle(_) => None,
        }
    }

    pub fn grid(&self) -> Option<&StitchGrid> {
        match self {
            EnvModel::Tabular(t) => t.grid.as_ref(),
            EnvModel::Wordle(_) => None,
        }
    }

    /// Competent hand-written policy: Q*-greedy for tabular tasks, a
    /// consistent-word solver for mini-Wordle.
    pub fn scripted_policy(&self) -> Result<Box<dyn Policy>, EnvError> {
        Ok(match self {
            EnvModel::Tabular(t) => {
                let q = value_iteration(&t.mdp, 1e-12, 1_000_000)?;
                Box::new(q.greedy_policy())
            }
            EnvModel::Wordle(w) => Box::new(WordleSolver::new(w.clone())),
        })
    }

    pub fn episode(&self) -> Episode {
        match self {
            EnvModel::Tabular(t) => Episode::Tabular(TabularEpisode {
                model: t.clone(),
                state: 0,
                steps: 0,
                finished: true,
                reached_goal: false,
            }),
            EnvModel::Wordle(w) => Episode::Wordle(WordleEpisode::new(w.clone())),
        }
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Obs,
    pub reward: f64,
    pub done: bool,
    /// Episode hit the horizon without reaching a terminal state.
    pub truncated: bool,
}

/// Mutable per-episode state; never shared between threads.
#[derive(Debug)]
pub enum Episode {
    Tabular(TabularEpisode),
    Wordle(WordleEpisode),
}

impl Episode {
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Obs {
        match self {
            Episode::Tabular(e) => e.reset(rng),
            Episode::Wordle(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<Step, EnvError> {
        match self {
            Episode::Tabular(e) => e.step(action, rng),
            Episode::Wordle(e) => e.step(action),
        }
    }

    /// Whether the finished episode solved the task, when the task defines
    /// success.
    pub fn success(&self) -> Option<bool> {
        match self {
            Episode::Tabular(e) => e.model.goal.map(|_| e.reached_goal),
            Episode::Wordle(e) => Some(e.solved()),
        }
    }
}

#[derive(Debug)]
pub struct TabularEpisode {
    model: Arc<TabularModel>,
    state: usize,
    steps: usize,
    finished: bool,
    reached_goal: bool,
}

impl TabularEpisode {
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Obs {
        self.state = sample_action(self.model.mdp.initial_dist(), rng);
        self.steps = 0;
        self.finished = false;
        self.reached_goal = false;
        Obs::State(self.state)
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<Step, EnvError> {
        let mdp = &self.model.mdp;
        if action >= mdp.num_actions() {
            return Err(EnvError::InvalidAction { action, num_actions: mdp.num_actions() });
        }
        if self.finished {
            return Err(EnvError::Finished);
        }
        let reward = mdp.reward(self.state, action);
        let next = sample_next(mdp.next_dist(self.state, action), rng);
        self.state = next;
        self.steps += 1;
        let terminal = mdp.is_terminal(next);
        let truncated = !terminal && self.steps >= self.model.horizon;
        self.finished = terminal || truncated;
        self.reached_goal = self.model.goal == Some(next);
        Ok(Step { obs: Obs::State(next), reward, done: self.finished, truncated })
    }
}

fn sample_next(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    // Deterministic rows skip the RNG so they never perturb the stream.
    if let Some(s) = dist.iter().position(|p| *p == 1.0) {
        return s;
    }
    sample_action(dist, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn spec_serialization_is_tagged() {
        let spec = EnvSpec::GridworldStitch { width: 5, height: 5, discount: 0.95 };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"name":"gridworld-stitch","width":5,"height":5,"discount":0.95}"#);
        assert_eq!(serde_json::from_str::<EnvSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn tabular_episode_truncates_at_horizon() {
        let model = EnvSpec::GridworldStitch { width: 3, height: 3, discount: 0.9 }.build().unwrap();
        let mut ep = model.episode();
        let mut rng = stream_rng(0, 0);
        ep.reset(&mut rng);
        let mut last = None;
        // action 2 (down) from the start corner bumps the border forever
        for _ in 0..model.horizon() {
            last = Some(ep.step(2, &mut rng).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && last.truncated);
        assert!(matches!(ep.step(2, &mut rng), Err(EnvError::Finished)));
        assert_eq!(ep.success(), Some(false));
        assert!(matches!(ep.step(9, &mut rng), Err(EnvError::InvalidAction { .. })));
    }

    #[test]
    fn identical_specs_build_identical_mdps() {
        let spec = EnvSpec::RandomMdp { num_states: 7, num_actions: 3, branching: 2, discount: 0.9, seed: 4 };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        assert_eq!(a.tabular().unwrap(), b.tabular().unwrap());
    }
}
