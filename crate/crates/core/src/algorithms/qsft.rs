use super::common::{fit_ce, gather, init_net, sample_batch, state_features, step};
use super::{check_scaled, num_actions, trailing_window_ok, Algo, Curve, NeuralPolicy, TrainConfig, TrainError, TrainedArtifacts, TrainedModel};
use crate::dataset::Dataset;
use crate::features::Featurizer;
use crate::nn::{Adam, Loss, TargetCopy};
use crate::par::stream_rng;
use crate::tabular::{max_ratio, TabularError};

/// Two-phase Q-SFT.
///
/// Phase 1 fits the behavior model `pi_phi` by cross-entropy. Phase 2 fits
/// the likelihood model `p_theta` by weighted cross-entropy against
/// `clamp(r + gamma * max_a' p_target(a'|s') / pi_phi(a'|s'), 0, 1)`, with a
/// Polyak update of the target copy after every step. Both networks start
/// from the same initialization. The deployed policy is the extraction
/// `pi_phi * exp(beta * p_theta)`, built at evaluation time.
pub fn train_qsft(dataset: &Dataset, featurizer: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    check_scaled(dataset, cfg.gamma)?;
    let na = num_actions(dataset);
    if na < 2 {
        return Err(TrainError::Config("Q-SFT needs at least two actions".into()));
    }
    let trans = dataset.transitions();
    let feats = state_features(dataset, featurizer)?;
    let actions: Vec<usize> = trans.iter().map(|t| t.action).collect();
    let init = init_net(featurizer.width(), na, cfg)?;

    let mut behavior = init.clone();
    let phase1 = fit_ce(&mut behavior, &feats, &actions, cfg.lr_behavior, cfg, 1, "behavior")?;

    // pi_phi is frozen from here on, so its next-state rows are computed once.
    let live: Vec<usize> = (0..trans.len()).filter(|&i| !trans[i].done).collect();
    let mut next_feats = vec![Vec::new(); trans.len()];
    for &i in &live {
        next_feats[i] = featurizer.encode(&trans[i].next_state)?;
    }
    let mut behavior_next = vec![Vec::new(); trans.len()];
    for chunk in live.chunks(1024) {
        let rows = behavior.forward(&gather(&next_feats, chunk))?;
        for (&i, row) in chunk.iter().zip(rows) {
            behavior_next[i] = row;
        }
    }

    let mut theta = init;
    let mut target = TargetCopy::new(&theta, cfg.polyak)?;
    let mut opt = Adam::new(theta.num_params(), cfg.lr_likelihood)?;
    let mut rng = stream_rng(cfg.seed, 2);
    let mut phase2 = Vec::with_capacity(cfg.total_updates());
    for u in 0..cfg.total_updates() {
        let idx = sample_batch(&mut rng, trans.len(), cfg.batch_size);
        let boot: Vec<usize> = idx.iter().copied().filter(|&i| !trans[i].done).collect();
        let p_next = if boot.is_empty() { Vec::new() } else { target.net.forward(&gather(&next_feats, &boot))? };
        let mut k = 0;
        let mut targets = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = &trans[i];
            let mut y = t.reward;
            if !t.done {
                let m = max_ratio(&p_next[k], &behavior_next[i], cfg.ratio_floor).ok_or_else(|| {
                    TabularError::NoSupportedAction { state: t.next_state.clone(), floor: cfg.ratio_floor }
                })?;
                y += cfg.gamma * m;
                k += 1;
            }
            targets.push(y.clamp(0.0, 1.0));
        }
        let (f, a) = (gather(&feats, &idx), gather(&actions, &idx));
        phase2.push(step(&mut theta, &mut opt, &f, &Loss::Wce { actions: &a, targets: &targets }, "likelihood", u)?);
        target.update(&theta)?;
    }

    let mut warnings = Vec::new();
    let curve2 = Curve { phase: "likelihood".into(), losses: phase2 };
    if !trailing_window_ok(&curve2.iteration_means(cfg.updates_per_iteration), 10, 2.0) {
        warnings.push("likelihood loss rose over the last 10 iterations beyond minibatch noise".into());
    }
    Ok(TrainedArtifacts {
        algo: Algo::Qsft,
        config: cfg.clone(),
        model: TrainedModel::Qsft {
            likelihood: NeuralPolicy { net: theta, featurizer: featurizer.clone() },
            behavior: NeuralPolicy { net: behavior, featurizer: featurizer.clone() },
        },
        curves: vec![Curve { phase: "behavior".into(), losses: phase1 }, curve2],
        warnings,
    })
}
