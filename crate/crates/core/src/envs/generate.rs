//! Offline dataset collection by rolling out a policy in an environment.

use serde::{Deserialize, Serialize};

use super::{EnvError, EnvModel, EnvSpec};
use crate::dataset::{Dataset, DatasetMeta, Transition};
use crate::par::{stream_rng, try_map_indexed, Exec};
use crate::policy::{sample_action, EpisodeContext, Mixture, Policy};

/// Per-step mixture of the environment's scripted policy (weight `epsilon`)
/// with uniform random actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPolicy {
    pub epsilon: f64,
}

impl GeneratorPolicy {
    pub fn new(epsilon: f64) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(EnvError::Params(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { epsilon })
    }
}

/// Generates `n_episodes` trajectories from the mixture generator. Episodes
/// run in parallel, each on its own index-derived RNG stream.
pub fn rollout_dataset(env: &EnvSpec, gen: GeneratorPolicy, n_episodes: usize, seed: u64) -> Result<Dataset, EnvError> {
    let gen = GeneratorPolicy::new(gen.epsilon)?;
    let model = env.build()?;
    let policy = Mixture { scripted: model.scripted_policy()?, weight: gen.epsilon };
    let generator = serde_json::json!({ "kind": "mixture", "epsilon": gen.epsilon });
    collect_dataset(&model, env, &policy, n_episodes, seed, Exec::default(), generator)
}

/// Rolls out any policy and packages the trajectories. Trajectory `i` uses
/// RNG stream `i` under `seed`, so output is independent of scheduling.
pub fn collect_dataset(
    model: &EnvModel,
    spec: &EnvSpec,
    policy: &dyn Policy,
    n_episodes: usize,
    seed: u64,
    exec: Exec,
    generator: serde_json::Value,
) -> Result<Dataset, EnvError> {
    if n_episodes == 0 {
        return Err(EnvError::NoEpisodes);
    }
    let episodes = try_map_indexed(exec, n_episodes, |i| run_episode(model, policy, i as u64, seed))?;
    let meta = DatasetMeta {
        env: spec.name().into(),
        gamma: model.discount(),
        reward_scale: 1.0,
        seed,
        num_trajectories: n_episodes,
        num_actions: model.num_actions(),
        env_spec: Some(spec.clone()),
        generator: Some(generator),
    };
    Ok(Dataset::new(episodes.into_iter().flatten().collect(), meta)?)
}

fn run_episode(model: &EnvModel, policy: &dyn Policy, id: u64, seed: u64) -> Result<Vec<Transition>, EnvError> {
    let mut rng = stream_rng(seed, id);
    let mut ep = model.episode();
    let mut obs = ep.reset(&mut rng);
    let mut ctx = EpisodeContext::default();
    let mut out = Vec::new();
    loop {
        let probs = policy.action_probs(&obs, &ctx)?;
        let action = sample_action(&probs, &mut rng);
        let step = ep.step(action, &mut rng)?;
        out.push(Transition {
            traj_id: id,
            step_index: ctx.step as u32,
            state: obs,
            action,
            reward: step.reward,
            next_state: step.obs.clone(),
            done: step.done,
        });
        ctx.step += 1;
        ctx.return_so_far += step.reward;
        obs = step.obs;
        if step.done {
            return Ok(out);
        }
    }
}
