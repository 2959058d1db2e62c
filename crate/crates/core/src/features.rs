//! Multi-hot feature encodings for the neural models.
//!
//! Tabular states are one-hot over state ids. Token histories are one-hot per
//! position over the token vocabulary (PAD included), so a history of length
//! `n` over `v` tokens has width `n * v` with exactly `n` active entries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Obs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("state {0:?} does not fit encoding {1:?}")]
    Mismatch(Obs, Featurizer),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Featurizer {
    OneHotState { num_states: usize },
    TokenOneHot { length: usize, vocab: usize },
}

impl Featurizer {
    pub fn width(&self) -> usize {
        match self {
            Featurizer::OneHotState { num_states } => *num_states,
            Featurizer::TokenOneHot { length, vocab } => length * vocab,
        }
    }

    /// Active feature indices for one state.
    pub fn encode(&self, obs: &Obs) -> Result<Vec<u32>, FeatureError> {
        let mismatch = || FeatureError::Mismatch(obs.clone(), self.clone());
        match (self, obs) {
            (Featurizer::OneHotState { num_states }, Obs::State(s)) if s < num_states => Ok(vec![*s as u32]),
            (Featurizer::TokenOneHot { length, vocab }, Obs::Tokens(toks)) if toks.len() == *length => toks
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if (t as usize) < *vocab {
                        Ok((i * vocab) as u32 + t)
                    } else {
                        Err(mismatch())
                    }
                })
                .collect(),
            _ => Err(mismatch()),
        }
    }
}

/// Base encoding plus a one-hot bucket of a conditioning return.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnConditioned {
    pub base: Featurizer,
    pub buckets: usize,
}

impl ReturnConditioned {
    pub fn width(&self) -> usize {
        self.base.width() + self.buckets
    }

    /// Bucket of a return in `[0, 1]`; values outside are clamped.
    pub fn bucket(&self, ret: f64) -> usize {
        let b = (ret.clamp(0.0, 1.0) * self.buckets as f64).floor() as usize;
        b.min(self.buckets - 1)
    }

    pub fn encode(&self, obs: &Obs, ret: f64) -> Result<Vec<u32>, FeatureError> {
        let mut idx = self.base.encode(obs)?;
        idx.push((self.base.width() + self.bucket(ret)) as u32);
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_tokens() {
        let f = Featurizer::OneHotState { num_states: 4 };
        assert_eq!(f.encode(&Obs::State(3)).unwrap(), vec![3]);
        assert!(f.encode(&Obs::State(4)).is_err());
        let f = Featurizer::TokenOneHot { length: 3, vocab: 5 };
        assert_eq!(f.width(), 15);
        assert_eq!(f.encode(&Obs::Tokens(vec![1, 0, 4])).unwrap(), vec![1, 5, 14]);
        assert!(f.encode(&Obs::Tokens(vec![1, 0])).is_err());
        assert!(f.encode(&Obs::Tokens(vec![1, 0, 5])).is_err());
    }

    #[test]
    fn return_buckets() {
        let f = ReturnConditioned { base: Featurizer::OneHotState { num_states: 2 }, buckets: 8 };
        assert_eq!(f.bucket(0.0), 0);
        assert_eq!(f.bucket(0.124), 0);
        assert_eq!(f.bucket(0.125), 1);
        assert_eq!(f.bucket(1.0), 7);
        assert_eq!(f.encode(&Obs::State(1), 1.0).unwrap(), vec![1, 9]);
    }
}
