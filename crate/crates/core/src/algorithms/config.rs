use serde::{Deserialize, Serialize};

use super::TrainError;

/// Training hyperparameters, shared by every trainer.
///
/// Plain-text form is one `key = value` per line with `#` comments. Lists
/// (only `hidden`) are comma separated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Extraction temperature.
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Polyak rate of the target copy.
    pub polyak: f64,
    pub updates_per_iteration: usize,
    pub iterations: usize,
    /// Learning rate of the behavior model.
    pub lr_behavior: f64,
    /// Learning rate of the likelihood (or Q) model.
    pub lr_likelihood: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Actions with behavior mass below this are left out of the ratio max.
    pub ratio_floor: f64,
    /// Additive count smoothing for tabular behavior estimates.
    pub smoothing: f64,
    /// Kept fraction for filtered BC.
    pub rho: f64,
    /// Return buckets for RCSL conditioning.
    pub rcsl_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.95,
            batch_size: 128,
            polyak: 0.005,
            updates_per_iteration: 60,
            iterations: 100,
            lr_behavior: 1e-4,
            lr_likelihood: 1e-4,
            seed: 0,
            hidden: vec![64, 64],
            ratio_floor: crate::tabular::DEFAULT_RATIO_FLOOR,
            smoothing: 0.0,
            rho: 0.1,
            rcsl_buckets: 8,
        }
    }
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl TrainConfig {
    pub fn total_updates(&self) -> usize {
        self.updates_per_iteration * self.iterations
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(bad(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(bad(format!("gamma = {} outside [0, 1)", self.gamma)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(bad(format!("polyak = {} outside (0, 1]", self.polyak)));
        }
        if self.batch_size == 0 || self.updates_per_iteration == 0 || self.iterations == 0 {
            return Err(bad("batch_size, updates_per_iteration and iterations must be positive"));
        }
        if !pos(self.lr_behavior) || !pos(self.lr_likelihood) || !pos(self.ratio_floor) {
            return Err(bad("learning rates and ratio_floor must be positive"));
        }
        if !(self.smoothing >= 0.0) {
            return Err(bad(format!("smoothing = {} must be >= 0", self.smoothing)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(bad(format!("rho = {} outside (0, 1]", self.rho)));
        }
        if self.rcsl_buckets == 0 || self.hidden.contains(&0) {
            return Err(bad("rcsl_buckets and hidden widths must be positive"));
        }
        Ok(())
    }

    /// Overrides one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let key = key.trim();
        let mut map = match serde_json::to_value(&*self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
        if !map.contains_key(key) {
            return Err(bad(format!("unknown key '{key}'")));
        }
        let value = value.trim();
        let parsed = if key == "hidden" {
            let widths: Result<Vec<usize>, _> =
                value.split(',').filter(|w| !w.trim().is_empty()).map(|w| w.trim().parse::<usize>()).collect();
            serde_json::json!(widths.map_err(|e| bad(format!("hidden = '{value}': {e}")))?)
        } else {
            serde_json::from_str(value).map_err(|_| bad(format!("{key} = '{value}' is not a number")))?
        };
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| bad(format!("{key} = '{value}': {e}")))?;
        Ok(())
    }

    /// Parses a `key = value` file body on top of the defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Text form that [`TrainConfig::from_kv_str`] reads back unchanged.
    pub fn to_kv_string(&self) -> String {
        let map = match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        let mut out = String::new();
        for (k, v) in map {
            let text = match v {
                serde_json::Value::Array(items) => items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
        out
    }
}
