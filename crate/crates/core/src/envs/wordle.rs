//! Mini-Wordle as a token MDP.
//!
//! The agent emits one letter token per step. After `word_length` letters the
//! environment appends one feedback token per letter. The episode ends on a
//! correct guess (reward 1) or after `max_guesses` wrong ones (reward 0).
//!
//! Token ids: `0` is PAD, `1..=alphabet` are letters, then EXACT, PRESENT,
//! ABSENT. The state is the token history padded with PAD to a fixed length
//! of `horizon * 2`: one letter slot and one feedback slot per agent step.

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{EnvError, Step};
use crate::dataset::Obs;
use crate::features::Featurizer;
use crate::policy::{EpisodeContext, Policy, PolicyError};

pub const PAD: u32 = 0;
const MAX_WORDS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Exact,
    Present,
    Absent,
}

/// Per-letter feedback with standard duplicate handling: exact matches are
/// marked first, then remaining guess letters are `Present` only while
/// unmatched copies of that letter remain in the hidden word.
pub fn feedback(hidden: &[u8], guess: &[u8]) -> Vec<Feedback> {
    let mut out = vec![Feedback::Absent; guess.len()];
    let mut unmatched = [0u8; 256];
    for (i, (&h, &g)) in hidden.iter().zip(guess).enumerate() {
        if h == g {
            out[i] = Feedback::Exact;
        } else {
            unmatched[h as usize] += 1;
        }
    }
    for (i, &g) in guess.iter().enumerate() {
        if out[i] != Feedback::Exact && unmatched[g as usize] > 0 {
            unmatched[g as usize] -= 1;
            out[i] = Feedback::Present;
        }
    }
    out
}

/// One completed guess with its feedback.
pub type Turn = (Vec<u8>, Vec<Feedback>);

#[derive(Debug)]
pub struct MiniWordle {
    word_length: usize,
    alphabet: usize,
    max_guesses: usize,
    discount: f64,
    words: Vec<Vec<u8>>,
}

impl MiniWordle {
    pub fn new(word_length: usize, alphabet: usize, max_guesses: usize, discount: f64) -> Result<Self, EnvError> {
        if word_length == 0 || max_guesses == 0 || !(2..=255).contains(&alphabet) {
            return Err(EnvError::Params(format!(
                "word_length={word_length}, alphabet={alphabet}, max_guesses={max_guesses}"
            )));
        }
        let n_words = (alphabet as u64).checked_pow(word_length as u32).unwrap_or(u64::MAX);
        if n_words > MAX_WORDS as u64 {
            return Err(EnvError::Params(format!("{n_words} words exceed the {MAX_WORDS}-word limit")));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(EnvError::Params(format!("discount {discount} outside [0, 1)")));
        }
        let words = (0..n_words as usize)
            .map(|mut i| {
                let mut w = vec![0u8; word_length];
                for slot in w.iter_mut().rev() {
                    *slot = (i % alphabet) as u8;
                    i /= alphabet;
                }
                w
            })
            .collect();
        Ok(Self { word_length, alphabet, max_guesses, discount, words })
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn word_length(&self) -> usize {
        self.word_length
    }

    pub fn max_guesses(&self) -> usize {
        self.max_guesses
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Candidate hidden words in lexicographic order.
    pub fn words(&self) -> &[Vec<u8>] {
        &self.words
    }

    /// Maximum agent steps per episode.
    pub fn horizon(&self) -> usize {
        self.word_length * self.max_guesses
    }

    pub fn encoding_len(&self) -> usize {
        self.horizon() * 2
    }

    pub fn vocab(&self) -> usize {
        self.alphabet + 4
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer::TokenOneHot { length: self.encoding_len(), vocab: self.vocab() }
    }

    pub fn letter_token(&self, letter: u8) -> u32 {
        1 + letter as u32
    }

    pub fn feedback_token(&self, fb: Feedback) -> u32 {
        let base = self.alphabet as u32 + 1;
        match fb {
            Feedback::Exact => base,
            Feedback::Present => base + 1,
            Feedback::Absent => base + 2,
        }
    }

    fn decode_feedback(&self, tok: u32) -> Option<Feedback> {
        let base = self.alphabet as u32 + 1;
        match tok.checked_sub(base)? {
            0 => Some(Feedback::Exact),
            1 => Some(Feedback::Present),
            2 => Some(Feedback::Absent),
            _ => None,
        }
    }

    /// Completed `(guess, feedback)` turns and the partial current guess.
    pub fn parse(&self, tokens: &[u32]) -> Result<(Vec<Turn>, Vec<u8>), String> {
        let mut turns = Vec::new();
        let mut letters = Vec::new();
        let mut fbs = Vec::new();
        for &tok in tokens.iter().take_while(|t| **t != PAD) {
            if (1..=self.alphabet as u32).contains(&tok) {
                if !fbs.is_empty() || letters.len() == self.word_length {
                    return Err(format!("letter token {tok} out of place"));
                }
                letters.push((tok - 1) as u8);
            } else if let Some(fb) = self.decode_feedback(tok) {
                if letters.len() != self.word_length {
                    return Err("feedback before a complete guess".into());
                }
                fbs.push(fb);
                if fbs.len() == self.word_length {
                    turns.push((std::mem::take(&mut letters), std::mem::take(&mut fbs)));
                }
            } else {
                return Err(format!("unknown token {tok}"));
            }
        }
        Ok((turns, letters))
    }

    fn pad(&self, history: &[u32]) -> Obs {
        let mut toks = history.to_vec();
        toks.resize(self.encoding_len(), PAD);
        Obs::Tokens(toks)
    }
}

#[derive(Debug)]
pub struct WordleEpisode {
    model: Arc<MiniWordle>,
    hidden: Vec<u8>,
    history: Vec<u32>,
    partial: Vec<u8>,
    guesses: usize,
    solved: bool,
    finished: bool,
}

impl WordleEpisode {
    pub fn new(model: Arc<MiniWordle>) -> Self {
        Self {
            model,
            hidden: Vec::new(),
            history: Vec::new(),
            partial: Vec::new(),
            guesses: 0,
            solved: false,
            finished: true,
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Obs {
        let idx = rng.random_range(0..self.model.words.len());
        self.reset_with(self.model.words[idx].clone())
    }

    /// Starts an episode with a chosen hidden word.
    pub fn reset_with(&mut self, hidden: Vec<u8>) -> Obs {
        self.hidden = hidden;
        self.history.clear();
        self.partial.clear();
        self.guesses = 0;
        self.solved = false;
        self.finished = false;
        self.model.pad(&self.history)
    }

    pub fn solved(&self) -> bool {
        self.solved
    }

    pub fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let m = &self.model;
        if action >= m.alphabet {
            return Err(EnvError::InvalidAction { action, num_actions: m.alphabet });
        }
        if self.finished {
            return Err(EnvError::Finished);
        }
        let letter = action as u8;
        self.history.push(m.letter_token(letter));
        self.partial.push(letter);
        let mut reward = 0.0;
        if self.partial.len() == m.word_length {
            for fb in feedback(&self.hidden, &self.partial) {
                self.history.push(m.feedback_token(fb));
            }
            self.guesses += 1;
            if self.partial == self.hidden {
                self.solved = true;
                self.finished = true;
                reward = 1.0;
            } else if self.guesses == m.max_guesses {
                self.finished = true;
            }
            self.partial.clear();
        }
        Ok(Step { obs: m.pad(&self.history), reward, done: self.finished, truncated: false })
    }
}

/// Deterministic solver. Among the words still consistent with all feedback
/// it spells the one whose feedback splits the remaining candidates into the
/// most classes (lowest index on ties).
pub struct WordleSolver {
    model: Arc<MiniWordle>,
    opener: OnceLock<Vec<u8>>,
}

impl WordleSolver {
    pub fn new(model: Arc<MiniWordle>) -> Self {
        Self { model, opener: OnceLock::new() }
    }

    pub fn next_letter(&self, tokens: &[u32]) -> Result<u8, String> {
        let (turns, partial) = self.model.parse(tokens)?;
        let target = if turns.is_empty() {
            self.opener.get_or_init(|| best_split(&self.model.words.iter().collect::<Vec<_>>()).clone())
        } else {
            let candidates: Vec<&Vec<u8>> = self
                .model
                .words
                .iter()
                .filter(|w| turns.iter().all(|(g, fb)| feedback(w, g) == *fb))
                .collect();
            if candidates.is_empty() {
                return Ok(0);
            }
            best_split(&candidates)
        };
        Ok(target[partial.len()])
    }
}

fn best_split<'a>(candidates: &[&'a Vec<u8>]) -> &'a Vec<u8> {
    if candidates.len() <= 2 {
        return candidates[0];
    }
    let mut best = (0, candidates[0]);
    for &guess in candidates {
        let classes: HashSet<Vec<Feedback>> = candidates.iter().map(|h| feedback(h, guess)).collect();
        if classes.len() > best.0 {
            best = (classes.len(), guess);
        }
    }
    best.1
}

impl Policy for WordleSolver {
    fn num_actions(&self) -> usize {
        self.model.alphabet
    }

    fn action_probs(&self, obs: &Obs, _ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError> {
        let Obs::Tokens(toks) = obs else {
            return Err(PolicyError::UndefinedState(obs.clone()));
        };
        let letter = self.next_letter(toks).map_err(PolicyError::Model)?;
        let mut p = vec![0.0; self.model.alphabet];
        p[letter as usize] = 1.0;
        Ok(p)
    }
}
