use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Algo, TrainConfig, TrainError};
use crate::dataset::{Dataset, Obs};
use crate::features::{Featurizer, ReturnConditioned};
use crate::mdp::argmax;
use crate::nn::{self, DenseNet};
use crate::policy::{EpisodeContext, Policy, PolicyError, ProbabilityModel};
use crate::tabular::ExtractedPolicy;

/// Softmax network over encoded states.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPolicy {
    pub net: DenseNet,
    pub featurizer: Featurizer,
}

impl NeuralPolicy {
    fn encode(&self, states: &[&Obs]) -> Result<Vec<Vec<u32>>, PolicyError> {
        states
            .iter()
            .map(|s| self.featurizer.encode(s).map_err(|_| PolicyError::UndefinedState((*s).clone())))
            .collect()
    }
}

impl ProbabilityModel for NeuralPolicy {
    fn num_actions(&self) -> usize {
        self.net.num_outputs()
    }

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError> {
        let feats = self.encode(states)?;
        self.net.forward(&feats).map_err(|e| PolicyError::Model(e.to_string()))
    }
}

/// Actions observed per state in the training data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Support {
    #[serde(with = "support_entries")]
    pub mask: HashMap<Obs, Vec<bool>>,
}

mod support_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &HashMap<Obs, Vec<bool>>, s: S) -> Result<S::Ok, S::Error> {
        let mut entries: Vec<_> = m.iter().collect();
        entries.sort();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HashMap<Obs, Vec<bool>>, D::Error> {
        let entries: Vec<(Obs, Vec<bool>)> = Vec::deserialize(d)?;
        Ok(entries.into_iter().collect())
    }
}

impl Support {
    pub fn from_dataset(dataset: &Dataset, num_actions: usize) -> Self {
        let mut mask: HashMap<Obs, Vec<bool>> = HashMap::new();
        for t in dataset.transitions() {
            mask.entry(t.state.clone()).or_insert_with(|| vec![false; num_actions])[t.action] = true;
        }
        Self { mask }
    }

    /// Supported actions at `obs`, or `None` for states the data never visits.
    pub fn get(&self, obs: &Obs) -> Option<&[bool]> {
        self.mask.get(obs).map(Vec::as_slice)
    }
}

/// Largest value among supported actions; every action when `mask` is `None`.
pub(crate) fn masked_argmax(values: &[f64], mask: Option<&[bool]>) -> usize {
    match mask {
        None => argmax(values),
        Some(m) => {
            let masked: Vec<f64> =
                values.iter().zip(m).map(|(v, ok)| if *ok { *v } else { f64::NEG_INFINITY }).collect();
            argmax(&masked)
        }
    }
}

/// Greedy policy of a Q network over dataset-supported actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TdPolicy {
    pub q: DenseNet,
    pub featurizer: Featurizer,
    pub support: Support,
}

impl TdPolicy {
    pub fn q_values(&self, obs: &Obs) -> Result<Vec<f64>, PolicyError> {
        let f = self.featurizer.encode(obs).map_err(|_| PolicyError::UndefinedState(obs.clone()))?;
        self.q.logits(&[f]).map_err(|e| PolicyError::Model(e.to_string()))
    }
}

impl ProbabilityModel for TdPolicy {
    fn num_actions(&self) -> usize {
        self.q.num_outputs()
    }

    fn probs_batch(&self, states: &[&Obs]) -> Result<Vec<Vec<f64>>, PolicyError> {
        states
            .iter()
            .map(|s| {
                let q = self.q_values(s)?;
                let mut p = vec![0.0; q.len()];
                p[masked_argmax(&q, self.support.get(s))] = 1.0;
                Ok(p)
            })
            .collect()
    }
}

/// Return-conditioned policy; each step conditions on the return still to
/// be collected, `target - return_so_far`.
#[derive(Debug, Clone, PartialEq)]
pub struct RcslPolicy {
    pub net: DenseNet,
    pub features: ReturnConditioned,
    pub target_return: f64,
}

impl Policy for RcslPolicy {
    fn num_actions(&self) -> usize {
        self.net.num_outputs()
    }

    fn action_probs(&self, obs: &Obs, ctx: &EpisodeContext) -> Result<Vec<f64>, PolicyError> {
        let togo = self.target_return - ctx.return_so_far;
        let f = self.features.encode(obs, togo).map_err(|_| PolicyError::UndefinedState(obs.clone()))?;
        let mut rows = self.net.forward(&[f]).map_err(|e| PolicyError::Model(e.to_string()))?;
        Ok(rows.pop().expect("one row"))
    }
}

/// Everything needed to act after training.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Qsft { likelihood: NeuralPolicy, behavior: NeuralPolicy },
    Bc { policy: NeuralPolicy },
    Tdq(TdPolicy),
    Rcsl { net: DenseNet, features: ReturnConditioned },
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    algo: Algo,
    config: TrainConfig,
    featurizer: Featurizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rcsl_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<Support>,
    #[serde(default)]
    extra: serde_json::Value,
}

impl TrainedModel {
    pub fn featurizer(&self) -> &Featurizer {
        match self {
            TrainedModel::Qsft { likelihood, .. } => &likelihood.featurizer,
            TrainedModel::Bc { policy } => &policy.featurizer,
            TrainedModel::Tdq(td) => &td.featurizer,
            TrainedModel::Rcsl { features, .. } => &features.base,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            TrainedModel::Qsft { likelihood, .. } => likelihood.net.num_outputs(),
            TrainedModel::Bc { policy } => policy.net.num_outputs(),
            TrainedModel::Tdq(td) => td.q.num_outputs(),
            TrainedModel::Rcsl { net, .. } => net.num_outputs(),
        }
    }

    /// Deployable policy. `beta` applies to Q-SFT extraction and
    /// `target_return` to RCSL conditioning; other models ignore them.
    pub fn policy(&self, beta: f64, target_return: f64) -> Result<Box<dyn Policy>, TrainError> {
        Ok(match self {
            TrainedModel::Qsft { likelihood, behavior } => {
                Box::new(ExtractedPolicy::new(likelihood.clone(), behavior.clone(), beta)?)
            }
            TrainedModel::Bc { policy } => Box::new(policy.clone()),
            TrainedModel::Tdq(td) => Box::new(td.clone()),
            TrainedModel::Rcsl { net, features } => {
                Box::new(RcslPolicy { net: net.clone(), features: features.clone(), target_return })
            }
        })
    }

    /// Writes a checkpoint whose header carries the algorithm, config and
    /// feature encoding next to the networks. `extra` is stored verbatim.
    pub fn save(
        &self,
        path: &std::path::Path,
        algo: Algo,
        config: &TrainConfig,
        step: u64,
        extra: serde_json::Value,
    ) -> Result<(), TrainError> {
        let mut meta = ModelMeta {
            algo,
            config: config.clone(),
            featurizer: self.featurizer().clone(),
            rcsl_buckets: None,
            support: None,
            extra,
        };
        let nets: Vec<(&str, &DenseNet)> = match self {
            TrainedModel::Qsft { likelihood, behavior } => vec![("likelihood", &likelihood.net), ("behavior", &behavior.net)],
            TrainedModel::Bc { policy } => vec![("policy", &policy.net)],
            TrainedModel::Tdq(td) => {
                meta.support = Some(td.support.clone());
                vec![("q", &td.q)]
            }
            TrainedModel::Rcsl { net, features } => {
                meta.rcsl_buckets = Some(features.buckets);
                vec![("policy", net)]
            }
        };
        let meta = serde_json::to_value(meta).map_err(nn::NnError::from)?;
        nn::save_checkpoint(path, &nets, config.seed, step, meta)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`TrainedModel::save`]; returns the
    /// algorithm, config and the `extra` value alongside the model.
    pub fn load(path: &std::path::Path) -> Result<(TrainedModel, Algo, TrainConfig, serde_json::Value), TrainError> {
        let ck = nn::load_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| TrainError::Checkpoint(format!("header metadata: {e}")))?;
        let net = |name: &str| {
            ck.net(name).cloned().ok_or_else(|| TrainError::Checkpoint(format!("missing network '{name}'")))
        };
        let featurizer = meta.featurizer.clone();
        let model = match meta.algo {
            Algo::Qsft => TrainedModel::Qsft {
                likelihood: NeuralPolicy { net: net("likelihood")?, featurizer: featurizer.clone() },
                behavior: NeuralPolicy { net: net("behavior")?, featurizer },
            },
            Algo::Bc | Algo::FilteredBc => TrainedModel::Bc { policy: NeuralPolicy { net: net("policy")?, featurizer } },
            Algo::Tdq => TrainedModel::Tdq(TdPolicy {
                q: net("q")?,
                featurizer,
                support: meta.support.clone().unwrap_or_default(),
            }),
            Algo::Rcsl => TrainedModel::Rcsl {
                net: net("policy")?,
                features: ReturnConditioned {
                    base: featurizer,
                    buckets: meta.rcsl_buckets.ok_or_else(|| TrainError::Checkpoint("missing rcsl_buckets".into()))?,
                },
            },
        };
        Ok((model, meta.algo, meta.config, meta.extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn masked_argmax_respects_support() {
        assert_eq!(masked_argmax(&[0.1, 0.9, 0.5], None), 1);
        assert_eq!(masked_argmax(&[0.1, 0.9, 0.5], Some(&[true, false, true])), 2);
    }

    #[test]
    fn checkpoint_round_trip_per_model() {
        let dir = tempfile::tempdir().unwrap();
        let f = Featurizer::OneHotState { num_states: 3 };
        let net = DenseNet::new(&[3, 4, 2], &mut stream_rng(0, 0)).unwrap();
        let np = NeuralPolicy { net: net.clone(), featurizer: f.clone() };
        let mut support = Support::default();
        support.mask.insert(Obs::State(1), vec![false, true]);
        let models = [
            (Algo::Qsft, TrainedModel::Qsft { likelihood: np.clone(), behavior: np.clone() }),
            (Algo::Bc, TrainedModel::Bc { policy: np.clone() }),
            (Algo::Tdq, TrainedModel::Tdq(TdPolicy { q: net.clone(), featurizer: f.clone(), support })),
            (
                Algo::Rcsl,
                TrainedModel::Rcsl {
                    net: DenseNet::new(&[11, 4, 2], &mut stream_rng(0, 0)).unwrap(),
                    features: ReturnConditioned { base: f.clone(), buckets: 8 },
                },
            ),
        ];
        for (algo, model) in models {
            let path = dir.path().join(format!("{}.bin", algo.name()));
            let cfg = TrainConfig { seed: 3, ..Default::default() };
            model.save(&path, algo, &cfg, 10, serde_json::json!({"k": 1})).unwrap();
            let (back, a, c, extra) = TrainedModel::load(&path).unwrap();
            assert_eq!((back, a, c, extra), (model, algo, cfg, serde_json::json!({"k": 1})));
        }
    }

    #[test]
    fn td_policy_is_greedy_over_support() {
        let f = Featurizer::OneHotState { num_states: 1 };
        // q = (1, 3, 2) at state 0
        let q = DenseNet::from_params(&[1, 3], vec![0.0, 0.0, 0.0, 1.0, 3.0, 2.0]).unwrap();
        let mut support = Support::default();
        let td = TdPolicy { q: q.clone(), featurizer: f.clone(), support: support.clone() };
        assert_eq!(td.probs(&Obs::State(0)).unwrap(), vec![0.0, 1.0, 0.0]);
        support.mask.insert(Obs::State(0), vec![true, false, true]);
        let td = TdPolicy { q, featurizer: f, support };
        assert_eq!(td.probs(&Obs::State(0)).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(td.probs(&Obs::State(5)), Err(PolicyError::UndefinedState(_))));
    }
}
