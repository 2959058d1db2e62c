use anyhow::Result;
use clap::{Args, ValueEnum};
use qsft_core::envs::EnvSpec;

use crate::{fail, ExitClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvName {
    GridworldStitch,
    MiniWordle,
    RandomMdp,
    Bandit,
}

/// Environment selection flags, also settable by key from a sweep file.
#[derive(Debug, Clone, Default, Args)]
pub struct EnvArgs {
    #[arg(long, value_enum)]
    pub env: Option<EnvName>,
    /// Gridworld width and height.
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub word_len: Option<usize>,
    #[arg(long)]
    pub alphabet: Option<usize>,
    #[arg(long)]
    pub guesses: Option<usize>,
    /// Random-MDP state count.
    #[arg(long)]
    pub states: Option<usize>,
    /// Random-MDP action count.
    #[arg(long)]
    pub actions: Option<usize>,
    /// Random-MDP successors per pair.
    #[arg(long)]
    pub branching: Option<usize>,
    /// Random-MDP structure seed, independent of `--seed`.
    #[arg(long)]
    pub mdp_seed: Option<u64>,
    /// Bandit arm rewards, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub rewards: Option<Vec<f64>>,
    /// Discount; defaults to 0.95.
    #[arg(long)]
    pub gamma: Option<f64>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| fail(ExitClass::InvalidArgument, format!("{key}: cannot parse '{value}'")))
}

impl EnvArgs {
    /// True when any flag besides `--env` is present.
    fn has_params(&self) -> bool {
        self.grid.is_some()
            || self.word_len.is_some()
            || self.alphabet.is_some()
            || self.guesses.is_some()
            || self.states.is_some()
            || self.actions.is_some()
            || self.branching.is_some()
            || self.mdp_seed.is_some()
            || self.rewards.is_some()
            || self.gamma.is_some()
    }

    /// Sets one field by sweep-file key. Returns false for keys that are
    /// not environment keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "env" => {
                let name = EnvName::from_str(value.trim(), false)
                    .map_err(|_| fail(ExitClass::InvalidArgument, format!("unknown env '{value}'")))?;
                self.env = Some(name);
            }
            "grid" => {
                let dims: Vec<usize> = value
                    .split(['x', ' ', ','])
                    .filter(|s| !s.is_empty())
                    .map(|s| parse("grid", s))
                    .collect::<Result<_>>()?;
                if dims.len() != 2 {
                    return Err(fail(ExitClass::InvalidArgument, format!("grid: expected WxH, got '{value}'")));
                }
                self.grid = Some(dims);
            }
            "word_len" => self.word_len = Some(parse(key, value)?),
            "alphabet" => self.alphabet = Some(parse(key, value)?),
            "guesses" => self.guesses = Some(parse(key, value)?),
            "states" => self.states = Some(parse(key, value)?),
            "actions" => self.actions = Some(parse(key, value)?),
            "branching" => self.branching = Some(parse(key, value)?),
            "mdp_seed" => self.mdp_seed = Some(parse(key, value)?),
            "gamma" => self.gamma = Some(parse(key, value)?),
            "rewards" => {
                self.rewards = Some(value.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds the `EnvSpec`, or `None` when no environment was selected.
    /// Flags that do not belong to the selected environment are rejected.
    pub fn spec(&self) -> Result<Option<EnvSpec>> {
        let invalid = |m: String| Err(fail(ExitClass::InvalidArgument, m));
        let Some(name) = self.env else {
            if self.has_params() {
                return invalid("environment flags need --env".into());
            }
            return Ok(None);
        };
        let foreign: Vec<&str> = [
            ("--grid", self.grid.is_some(), EnvName::GridworldStitch),
            ("--word-len", self.word_len.is_some(), EnvName::MiniWordle),
            ("--alphabet", self.alphabet.is_some(), EnvName::MiniWordle),
            ("--guesses", self.guesses.is_some(), EnvName::MiniWordle),
            ("--states", self.states.is_some(), EnvName::RandomMdp),
            ("--actions", self.actions.is_some(), EnvName::RandomMdp),
            ("--branching", self.branching.is_some(), EnvName::RandomMdp),
            ("--mdp-seed", self.mdp_seed.is_some(), EnvName::RandomMdp),
            ("--rewards", self.rewards.is_some(), EnvName::Bandit),
        ]
        .into_iter()
        .filter(|&(_, given, owner)| given && owner != name)
        .map(|(flag, _, _)| flag)
        .collect();
        if !foreign.is_empty() {
            return invalid(format!("{} not applicable to this environment", foreign.join(", ")));
        }
        let discount = self.gamma.unwrap_or(0.95);
        let spec = match name {
            EnvName::GridworldStitch => {
                let dims = self.grid.clone().unwrap_or_else(|| vec![5, 5]);
                EnvSpec::GridworldStitch { width: dims[0], height: dims[1], discount }
            }
            EnvName::MiniWordle => EnvSpec::MiniWordle {
                word_length: self.word_len.unwrap_or(3),
                alphabet: self.alphabet.unwrap_or(5),
                max_guesses: self.guesses.unwrap_or(4),
                discount,
            },
            EnvName::RandomMdp => EnvSpec::RandomMdp {
                num_states: self.states.unwrap_or(10),
                num_actions: self.actions.unwrap_or(3),
                branching: self.branching.unwrap_or(3),
                discount,
                seed: self.mdp_seed.unwrap_or(0),
            },
            EnvName::Bandit => EnvSpec::Bandit { rewards: self.rewards.clone().unwrap_or_else(|| vec![0.9, 0.5, 0.1]), discount },
        };
        if let Err(e) = spec.build() {
            return invalid(e.to_string());
        }
        Ok(Some(spec))
    }
}
