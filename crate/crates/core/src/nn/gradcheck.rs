use rand::seq::index::sample;

use super::{DenseNet, Features, Loss, NnError};
use crate::par::stream_rng;

/// Parameters probed per check (all of them for smaller nets).
const PROBES: usize = 200;

/// Largest relative error between analytic gradients and central finite
/// differences over a seeded random subset of parameters.
///
/// Relative error is `|g - fd| / max(|g|, |fd|, 1e-8)`; the floor keeps
/// parameters with vanishing gradients from dividing by zero.
pub fn grad_check(net: &DenseNet, features: &Features, loss: &Loss, eps: f64, seed: u64) -> Result<f64, NnError> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(NnError::Eps(eps));
    }
    let (_, grad) = net.loss_and_grad(features, loss)?;
    let n = net.num_params();
    let mut rng = stream_rng(seed, 0);
    let probes = sample(&mut rng, n, PROBES.min(n));
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in probes.iter() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = probe.loss(features, loss)?;
        probe.params_mut()[i] = orig - eps;
        let down = probe.loss(features, loss)?;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
