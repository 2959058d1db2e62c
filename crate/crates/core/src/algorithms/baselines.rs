use super::common::{fit_ce, gather, init_net, sample_batch, state_features, step};
use super::models::masked_argmax;
use super::{check_scaled, num_actions, Algo, Curve, NeuralPolicy, Support, TdPolicy, TrainConfig, TrainError, TrainedArtifacts, TrainedModel};
use crate::dataset::{trajectory_return, Dataset};
use crate::features::{Featurizer, ReturnConditioned};
use crate::nn::{Adam, Loss, TargetCopy};
use crate::par::stream_rng;

fn supervised(
    dataset: &Dataset,
    featurizer: &Featurizer,
    cfg: &TrainConfig,
    algo: Algo,
) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let feats = state_features(dataset, featurizer)?;
    let actions: Vec<usize> = dataset.transitions().iter().map(|t| t.action).collect();
    let mut net = init_net(featurizer.width(), num_actions(dataset), cfg)?;
    let curve = fit_ce(&mut net, &feats, &actions, cfg.lr_behavior, cfg, 1, "policy")?;
    Ok(TrainedArtifacts {
        algo,
        config: cfg.clone(),
        model: TrainedModel::Bc { policy: NeuralPolicy { net, featurizer: featurizer.clone() } },
        curves: vec![Curve { phase: "policy".into(), losses: curve }],
        warnings: Vec::new(),
    })
}

/// Behavior cloning: cross-entropy on every transition.
pub fn train_bc(dataset: &Dataset, featurizer: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts, TrainError> {
    supervised(dataset, featurizer, cfg, Algo::Bc)
}

/// Behavior cloning on the top `ceil(rho * N)` trajectories by undiscounted
/// return; ties go to the lower trajectory id.
pub fn filtered_bc(dataset: &Dataset, featurizer: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    let mut ranked: Vec<(f64, u64)> = dataset.trajectories().map(|t| (trajectory_return(t), t[0].traj_id)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep_n = (cfg.rho * ranked.len() as f64).ceil() as usize;
    let keep: std::collections::HashSet<u64> = ranked.into_iter().take(keep_n).map(|(_, id)| id).collect();
    if keep.is_empty() {
        return Err(TrainError::FilteredEmpty);
    }
    let kept = dataset.filter_trajectories(|t| keep.contains(&t[0].traj_id))?;
    let mut out = supervised(&kept, featurizer, cfg, Algo::FilteredBc)?;
    out.warnings.push(format!("kept {} of {} trajectories", kept.num_trajectories(), dataset.num_trajectories()));
    Ok(out)
}

/// Fitted Q-iteration with a target copy: squared error against
/// `r + gamma * max_{a' supported} Q_target(s', a')`, where the support is
/// the set of actions the data takes at `s'`.
pub fn train_td_q(dataset: &Dataset, featurizer: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    check_scaled(dataset, cfg.gamma)?;
    let na = num_actions(dataset);
    let trans = dataset.transitions();
    let support = Support::from_dataset(dataset, na);
    let feats = state_features(dataset, featurizer)?;
    let actions: Vec<usize> = trans.iter().map(|t| t.action).collect();
    let mut next_feats = vec![Vec::new(); trans.len()];
    for (i, t) in trans.iter().enumerate().filter(|(_, t)| !t.done) {
        next_feats[i] = featurizer.encode(&t.next_state)?;
    }

    let mut q = init_net(featurizer.width(), na, cfg)?;
    let mut target = TargetCopy::new(&q, cfg.polyak)?;
    let mut opt = Adam::new(q.num_params(), cfg.lr_likelihood)?;
    let mut rng = stream_rng(cfg.seed, 1);
    let mut curve = Vec::with_capacity(cfg.total_updates());
    for u in 0..cfg.total_updates() {
        let idx = sample_batch(&mut rng, trans.len(), cfg.batch_size);
        let boot: Vec<usize> = idx.iter().copied().filter(|&i| !trans[i].done).collect();
        let q_next = if boot.is_empty() { Vec::new() } else { target.net.logits(&gather(&next_feats, &boot))? };
        let mut k = 0;
        let targets: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let t = &trans[i];
                if t.done {
                    return t.reward;
                }
                let row = &q_next[k * na..(k + 1) * na];
                k += 1;
                t.reward + cfg.gamma * row[masked_argmax(row, support.get(&t.next_state))]
            })
            .collect();
        let (f, a) = (gather(&feats, &idx), gather(&actions, &idx));
        curve.push(step(&mut q, &mut opt, &f, &Loss::Td { actions: &a, targets: &targets }, "q", u)?);
        target.update(&q)?;
    }
    Ok(TrainedArtifacts {
        algo: Algo::Tdq,
        config: cfg.clone(),
        model: TrainedModel::Tdq(TdPolicy { q, featurizer: featurizer.clone(), support }),
        curves: vec![Curve { phase: "q".into(), losses: curve }],
        warnings: Vec::new(),
    })
}

/// Return-conditioned cloning: each state is paired with the bucket of the
/// undiscounted return collected from that step to the end of its episode.
pub fn train_rcsl(dataset: &Dataset, featurizer: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let rc = ReturnConditioned { base: featurizer.clone(), buckets: cfg.rcsl_buckets };
    let mut feats = Vec::with_capacity(dataset.len());
    let mut actions = Vec::with_capacity(dataset.len());
    for traj in dataset.trajectories() {
        let mut togo = trajectory_return(traj);
        for t in traj {
            feats.push(rc.encode(&t.state, togo)?);
            actions.push(t.action);
            togo -= t.reward;
        }
    }
    let mut net = init_net(rc.width(), num_actions(dataset), cfg)?;
    let curve = fit_ce(&mut net, &feats, &actions, cfg.lr_behavior, cfg, 1, "policy")?;
    Ok(TrainedArtifacts {
        algo: Algo::Rcsl,
        config: cfg.clone(),
        model: TrainedModel::Rcsl { net, features: rc },
        curves: vec![Curve { phase: "policy".into(), losses: curve }],
        warnings: Vec::new(),
    })
}
