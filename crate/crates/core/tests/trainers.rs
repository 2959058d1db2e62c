use qsft_core::algorithms::{filtered_bc, train_bc, train_qsft, train_rcsl, train_td_q, TrainConfig, TrainError, TrainedModel};
use qsft_core::envs::{collect_dataset, rollout_dataset, EnvSpec, GeneratorPolicy};
use qsft_core::eval::{rollout, EvalMode};
use qsft_core::features::Featurizer;
use qsft_core::mdp::TabularPolicy;
use qsft_core::par::Exec;
use qsft_core::policy::ProbabilityModel;
use qsft_core::{Dataset, DatasetMeta, Obs, Transition};

fn meta(gamma: f64) -> DatasetMeta {
    DatasetMeta {
        env: "handmade".into(),
        gamma,
        reward_scale: 1.0,
        seed: 0,
        num_trajectories: 0,
        num_actions: 0,
        env_spec: None,
        generator: None,
    }
}

/// One-step episodes from state 0 into terminal state 1.
fn one_step(steps: &[(usize, f64)], gamma: f64) -> Dataset {
    let ts = steps
        .iter()
        .enumerate()
        .map(|(i, &(a, r))| Transition {
            traj_id: i as u64,
            step_index: 0,
            state: Obs::State(0),
            action: a,
            reward: r,
            next_state: Obs::State(1),
            done: true,
        })
        .collect();
    Dataset::new(ts, meta(gamma)).unwrap()
}

const TWO: Featurizer = Featurizer::OneHotState { num_states: 2 };

fn probs(m: &dyn ProbabilityModel) -> Vec<f64> {
    m.probs(&Obs::State(0)).unwrap()
}

#[test]
fn bc_recovers_action_frequencies() {
    let steps: Vec<(usize, f64)> = (0..400).map(|i| (usize::from(i % 4 == 3), 0.0)).collect();
    let art = train_bc(&one_step(&steps, 0.95), &TWO, &TrainConfig::default()).unwrap();
    let TrainedModel::Bc { policy } = &art.model else { panic!("bc model") };
    let p = probs(policy);
    assert!((p[0] - 0.75).abs() <= 0.03 && (p[1] - 0.25).abs() <= 0.03, "{p:?}");
    assert_eq!(art.curves[0].losses.len(), art.total_updates());
}

#[test]
fn qsft_two_action_bandit_goes_to_the_rewarded_action() {
    // rewards (1, 0): every target puts all mass on action 0
    let steps: Vec<(usize, f64)> = (0..200).map(|i| (i % 2, if i % 2 == 0 { 1.0 } else { 0.0 })).collect();
    let art = train_qsft(&one_step(&steps, 0.95), &TWO, &TrainConfig::default()).unwrap();
    let TrainedModel::Qsft { likelihood, behavior } = &art.model else { panic!("qsft model") };
    let p = probs(likelihood);
    assert!(p[0] >= 0.97, "{p:?}");
    let b = probs(behavior);
    assert!((b[0] - 0.5).abs() <= 0.03, "{b:?}");
    assert_eq!(art.total_updates(), 2 * 6000);
}

#[test]
fn td_recovers_bandit_rewards_and_mean_rewards_at_zero_discount() {
    let bandit: Vec<(usize, f64)> = (0..300).map(|i| (i % 3, [0.9, 0.5, 0.1][i % 3])).collect();
    let art = train_td_q(&one_step(&bandit, 0.95), &Featurizer::OneHotState { num_states: 2 }, &TrainConfig::default()).unwrap();
    let TrainedModel::Tdq(td) = &art.model else { panic!("td model") };
    let q = td.q_values(&Obs::State(0)).unwrap();
    for (got, want) in q.iter().zip([0.9, 0.5, 0.1]) {
        assert!((got - want).abs() <= 0.05, "{q:?}");
    }

    // action 0 pays 0.2 or 0.6, action 1 always 0.3
    let noisy: Vec<(usize, f64)> = (0..300).map(|i| if i % 3 == 2 { (1, 0.3) } else { (0, [0.2, 0.6][i % 3]) }).collect();
    let cfg = TrainConfig { gamma: 0.0, ..Default::default() };
    let art = train_td_q(&one_step(&noisy, 0.0), &TWO, &cfg).unwrap();
    let TrainedModel::Tdq(td) = &art.model else { panic!("td model") };
    let q = td.q_values(&Obs::State(0)).unwrap();
    assert!((q[0] - 0.4).abs() <= 0.05 && (q[1] - 0.3).abs() <= 0.05, "{q:?}");
}

fn grid() -> EnvSpec {
    EnvSpec::GridworldStitch { width: 4, height: 4, discount: 0.95 }
}

fn short(cfg: TrainConfig) -> TrainConfig {
    TrainConfig { iterations: 30, ..cfg }
}

#[test]
fn behavior_phase_and_filtered_bc_at_full_rho_are_bc() {
    let ds = rollout_dataset(&grid(), GeneratorPolicy::new(0.5).unwrap(), 60, 1).unwrap();
    let f = grid().build().unwrap().featurizer();
    let cfg = short(TrainConfig { rho: 1.0, seed: 3, ..Default::default() });
    let bc = train_bc(&ds, &f, &cfg).unwrap();
    let fbc = filtered_bc(&ds, &f, &cfg).unwrap();
    let q = train_qsft(&ds, &f, &cfg).unwrap();
    let (TrainedModel::Bc { policy: a }, TrainedModel::Bc { policy: b }, TrainedModel::Qsft { behavior, .. }) =
        (&bc.model, &fbc.model, &q.model)
    else {
        panic!("model kinds")
    };
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.net.params(), behavior.net.params());
}

#[test]
fn trainers_are_deterministic_given_seed() {
    let ds = rollout_dataset(&grid(), GeneratorPolicy::new(0.5).unwrap(), 40, 2).unwrap();
    let f = grid().build().unwrap().featurizer();
    let cfg = short(TrainConfig { seed: 11, ..Default::default() });
    let params = |cfg: &TrainConfig| match train_qsft(&ds, &f, cfg).unwrap().model {
        TrainedModel::Qsft { likelihood, .. } => likelihood.net.params().to_vec(),
        _ => unreachable!(),
    };
    assert_eq!(params(&cfg), params(&cfg));
    assert_ne!(params(&cfg), params(&TrainConfig { seed: 12, ..cfg.clone() }));
    let td = |cfg: &TrainConfig| match train_td_q(&ds, &f, cfg).unwrap().model {
        TrainedModel::Tdq(t) => t.q.params().to_vec(),
        _ => unreachable!(),
    };
    assert_eq!(td(&cfg), td(&cfg));
}

/// Expert episodes followed by uniform-random ones, renumbered.
fn mixed(n_expert: usize, n_random: usize, seed: u64) -> Dataset {
    let expert = rollout_dataset(&grid(), GeneratorPolicy::new(1.0).unwrap(), n_expert, seed).unwrap();
    let random = rollout_dataset(&grid(), GeneratorPolicy::new(0.0).unwrap(), n_random, seed + 1).unwrap();
    let mut ts: Vec<Transition> = expert.transitions().to_vec();
    ts.extend(random.transitions().iter().cloned().map(|mut t| {
        t.traj_id += n_expert as u64;
        t
    }));
    Dataset::new(ts, expert.meta().clone()).unwrap()
}

fn mean_return(model: &TrainedModel, beta: f64, target: f64, mode: EvalMode) -> f64 {
    let pol = model.policy(beta, target).unwrap();
    rollout(&grid(), &*pol, "p", 200, 5, mode, Exec::Parallel).unwrap().summary.mean_return
}

#[test]
fn supervised_baselines_on_gridworld() {
    let f = grid().build().unwrap().featurizer();
    let cfg = TrainConfig::default();

    let expert = rollout_dataset(&grid(), GeneratorPolicy::new(1.0).unwrap(), 50, 0).unwrap();
    let bc = train_bc(&expert, &f, &cfg).unwrap();
    assert_eq!(mean_return(&bc.model, 0.0, 0.0, EvalMode::Greedy), 1.0);

    let ds = mixed(40, 360, 4);
    let bc = train_bc(&ds, &f, &cfg).unwrap();
    let fbc = filtered_bc(&ds, &f, &TrainConfig { rho: 0.1, ..cfg.clone() }).unwrap();
    let (r_bc, r_fbc) = (mean_return(&bc.model, 0.0, 0.0, EvalMode::Sample), mean_return(&fbc.model, 0.0, 0.0, EvalMode::Sample));
    assert!(r_fbc > r_bc, "filtered {r_fbc} vs bc {r_bc}");

    // success (return 1) appears verbatim in the data
    let rcsl = train_rcsl(&ds, &f, &cfg).unwrap();
    let r = mean_return(&rcsl.model, 0.0, 1.0, EvalMode::Greedy);
    assert!(r >= 0.8, "rcsl conditioned on 1 achieved {r}");
}

#[test]
fn bad_inputs_are_rejected() {
    let ds = one_step(&[(0, 1.5)], 0.95);
    assert!(matches!(train_qsft(&ds, &TWO, &TrainConfig::default()), Err(TrainError::NotScaled { .. })));
    let ok = one_step(&[(0, 0.5), (1, 0.1)], 0.95);
    let bad = TrainConfig { polyak: 0.0, ..Default::default() };
    assert!(matches!(train_qsft(&ok, &TWO, &bad), Err(TrainError::Config(_))));
    let wide = Featurizer::TokenOneHot { length: 1, vocab: 2 };
    assert!(train_bc(&ok, &wide, &TrainConfig::default()).is_err());
    let diverge = TrainConfig { lr_likelihood: 1e300, ..Default::default() };
    let big: Vec<(usize, f64)> = (0..64).map(|i| (i % 2, (i % 2) as f64 * 0.9)).collect();
    let err = train_td_q(&one_step(&big, 0.95), &TWO, &diverge);
    assert!(matches!(err, Err(TrainError::Divergence { phase: "q", step: 1 })), "{err:?}");
}

#[test]
fn sample_data_round_trips_through_collect() {
    let spec = EnvSpec::Bandit { rewards: vec![0.9, 0.5, 0.1], discount: 0.95 };
    let model = spec.build().unwrap();
    let ds = collect_dataset(&model, &spec, &TabularPolicy::uniform(2, 3), 30, 0, Exec::Sequential, serde_json::json!({})).unwrap();
    assert_eq!(ds.num_trajectories(), 30);
    assert!(ds.transitions().iter().all(|t| t.done));
}
