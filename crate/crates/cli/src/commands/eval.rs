use anyhow::Result;
use qsft_core::algorithms::{Algo, TrainConfig, TrainedModel};
use qsft_core::envs::EnvSpec;
use qsft_core::eval::{rollout, EvalError, EvalMode, EvalReport};
use qsft_core::par::Exec;

use super::Run;
use crate::args::EvalArgs;
use crate::{fail, ExitClass};

pub(crate) fn eval_error(e: EvalError) -> anyhow::Error {
    let class = match &e {
        EvalError::NoEpisodes | EvalError::ActionMismatch { .. } => ExitClass::InvalidArgument,
        EvalError::Io(_) => ExitClass::Io,
        _ => return e.into(),
    };
    anyhow::Error::new(e).context(class)
}

/// Mean undiscounted return of the environment's scripted policy, the
/// default RCSL conditioning target.
pub(crate) fn scripted_return(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<f64> {
    let model = spec.build()?;
    let scripted = model.scripted_policy()?;
    let r = rollout(spec, &*scripted, "scripted", episodes, seed, EvalMode::Greedy, Exec::default()).map_err(eval_error)?;
    Ok(r.summary.mean_return)
}

pub(crate) struct Evaluation<'a> {
    pub spec: &'a EnvSpec,
    pub model: &'a TrainedModel,
    pub algo: Algo,
    pub beta: f64,
    /// In dataset reward units; divided by `reward_scale` before use.
    pub target_return: Option<f64>,
    pub reward_scale: f64,
    pub episodes: usize,
    pub seed: u64,
    pub mode: EvalMode,
    pub label: String,
}

impl Evaluation<'_> {
    pub fn run(&self) -> Result<EvalReport> {
        if self.model.featurizer() != &self.spec.build()?.featurizer() {
            return Err(fail(
                ExitClass::InvalidArgument,
                format!(
                    "checkpoint features have width {} but {} needs width {}",
                    self.model.featurizer().width(),
                    self.spec.name(),
                    self.spec.build()?.featurizer().width()
                ),
            ));
        }
        let target = match (self.algo, self.target_return) {
            (Algo::Rcsl, None) => scripted_return(self.spec, self.episodes, self.seed)?,
            (_, t) => t.unwrap_or(0.0),
        };
        let policy = self
            .model
            .policy(self.beta, target / self.reward_scale)
            .map_err(|e| fail(ExitClass::InvalidArgument, e))?;
        rollout(self.spec, &*policy, &self.label, self.episodes, self.seed, self.mode, Exec::default()).map_err(eval_error)
    }
}

pub(crate) fn label(algo: Algo, beta: f64) -> String {
    match algo {
        Algo::Qsft => format!("qsft(beta={beta})"),
        a => a.name().to_string(),
    }
}

pub fn run(args: EvalArgs, argv: Vec<String>) -> Result<()> {
    let env_flag = args.env.spec()?;
    if args.episodes == 0 {
        return Err(fail(ExitClass::InvalidArgument, "--episodes must be positive"));
    }
    if !args.checkpoint.is_file() {
        return Err(fail(ExitClass::Io, format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let (model, algo, cfg, extra): (TrainedModel, Algo, TrainConfig, serde_json::Value) = TrainedModel::load(&args.checkpoint)
        .map_err(|e| fail(ExitClass::Io, format!("cannot read checkpoint {}: {e}", args.checkpoint.display())))?;
    let spec = match env_flag {
        Some(s) => s,
        None => serde_json::from_value(extra["env_spec"].clone())
            .map_err(|_| fail(ExitClass::InvalidArgument, "checkpoint records no environment; pass --env"))?,
    };
    let beta = args.beta.unwrap_or(cfg.beta);
    if !beta.is_finite() || beta < 0.0 {
        return Err(fail(ExitClass::InvalidArgument, format!("--beta must be finite and >= 0, got {beta}")));
    }
    let reward_scale = extra["reward_scale"].as_f64().unwrap_or(1.0);

    let run = Run::new(argv, "eval", Some(args.seed), &args.out, "manifest.json");
    run.execute(|run| {
        run.input(&args.checkpoint)?;
        run.manifest.config = serde_json::json!({
            "algo": algo.name(),
            "env_spec": spec,
            "episodes": args.episodes,
            "mode": args.mode,
            "beta": beta,
            "target_return": args.target_return,
        });
        let report = Evaluation {
            spec: &spec,
            model: &model,
            algo,
            beta,
            target_return: args.target_return,
            reward_scale,
            episodes: args.episodes,
            seed: args.seed,
            mode: args.mode,
            label: label(algo, beta),
        }
        .run()?;
        let mut csv = Vec::new();
        report.write_episodes_csv(&mut csv).map_err(eval_error)?;
        run.write("episodes.csv", &csv)?;
        run.write("summary.json", report.summary_json().map_err(eval_error)?.as_bytes())?;
        let s = &report.summary;
        let success = s.success_rate.map(|r| format!(", success {r:.3}")).unwrap_or_default();
        println!(
            "{} on {} ({}, {} episodes): return {:.4} ± {:.4}{success}",
            s.policy,
            s.env,
            s.mode.name(),
            s.episodes,
            s.mean_return,
            s.stderr_return
        );
        Ok(())
    })
}
