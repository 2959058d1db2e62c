use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainError};
use crate::dataset::{Dataset, Obs};
use crate::features::Featurizer;
use crate::nn::{Adam, DenseNet, Loss};
use crate::par::stream_rng;

pub(crate) fn encode_all<'a>(
    featurizer: &Featurizer,
    states: impl Iterator<Item = &'a Obs>,
) -> Result<Vec<Vec<u32>>, TrainError> {
    states.map(|s| featurizer.encode(s).map_err(TrainError::from)).collect()
}

/// Network shape `[input, hidden..., outputs]`, initialized from stream 0.
pub(crate) fn init_net(input: usize, outputs: usize, cfg: &TrainConfig) -> Result<DenseNet, TrainError> {
    let mut sizes = vec![input];
    sizes.extend(&cfg.hidden);
    sizes.push(outputs);
    Ok(DenseNet::new(&sizes, &mut stream_rng(cfg.seed, 0))?)
}

/// Uniform indices with replacement.
pub(crate) fn sample_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

pub(crate) fn gather<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// One optimizer step; a non-finite loss aborts with the update index.
pub(crate) fn step(
    net: &mut DenseNet,
    opt: &mut Adam,
    feats: &[Vec<u32>],
    loss: &Loss,
    phase: &'static str,
    update: usize,
) -> Result<f64, TrainError> {
    let (value, grad) = net.loss_and_grad(feats, loss).map_err(|e| match e {
        crate::nn::NnError::NonFiniteGradient { .. } => TrainError::Divergence { phase, step: update },
        other => other.into(),
    })?;
    if !value.is_finite() {
        return Err(TrainError::Divergence { phase, step: update });
    }
    opt.step(net, &grad).map_err(|_| TrainError::Divergence { phase, step: update })?;
    Ok(value)
}

/// Cross-entropy fit of `net` to `(features, actions)` for the configured
/// number of updates, drawing batches from RNG stream `stream`.
pub(crate) fn fit_ce(
    net: &mut DenseNet,
    feats: &[Vec<u32>],
    actions: &[usize],
    lr: f64,
    cfg: &TrainConfig,
    stream: u64,
    phase: &'static str,
) -> Result<Vec<f64>, TrainError> {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut opt = Adam::new(net.num_params(), lr)?;
    let mut curve = Vec::with_capacity(cfg.total_updates());
    for u in 0..cfg.total_updates() {
        let idx = sample_batch(&mut rng, feats.len(), cfg.batch_size);
        let (f, a) = (gather(feats, &idx), gather(actions, &idx));
        curve.push(step(net, &mut opt, &f, &Loss::Ce { actions: &a }, phase, u)?);
    }
    Ok(curve)
}

pub(crate) fn state_features(dataset: &Dataset, featurizer: &Featurizer) -> Result<Vec<Vec<u32>>, TrainError> {
    encode_all(featurizer, dataset.transitions().iter().map(|t| &t.state))
}
