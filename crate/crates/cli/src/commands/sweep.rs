use anyhow::Result;
use qsft_core::algorithms::{Algo, TrainConfig};
use qsft_core::envs::EnvSpec;
use qsft_core::eval::{compare, EvalMode};

use super::eval::{eval_error, label, Evaluation};
use super::gen_data::generate;
use super::train::{dataset_env, scaled, train_algo, train_error};
use super::{kv_lines, read_text, split_set, Run};
use crate::args::SweepArgs;
use crate::envargs::EnvArgs;
use crate::{fail, ExitClass};

/// Parsed sweep file. Keys: environment keys as in `gen-data` (`env`,
/// `grid = 5x5`, `word_len`, ...), `algos`, `seeds`, `data_episodes`,
/// `epsilon`, `eval_episodes`, `mode`, `beta`, `target_return`, and
/// `train.<key>` for any training key.
#[derive(Debug)]
struct Sweep {
    env: EnvSpec,
    algos: Vec<Algo>,
    seeds: Vec<u64>,
    data_episodes: usize,
    epsilon: Option<f64>,
    eval_episodes: usize,
    mode: EvalMode,
    beta: Option<f64>,
    target_return: Option<f64>,
    train: TrainConfig,
}

fn parse_sweep(pairs: &[(String, String)]) -> Result<Sweep> {
    let invalid = |m: String| fail(ExitClass::InvalidArgument, m);
    let num = |k: &str, v: &str| -> Result<f64> { v.parse().map_err(|_| invalid(format!("{k}: cannot parse '{v}'"))) };
    let count = |k: &str, v: &str| -> Result<usize> { v.parse().map_err(|_| invalid(format!("{k}: cannot parse '{v}'"))) };
    let mut env = EnvArgs::default();
    let mut sweep = Sweep {
        env: EnvSpec::Bandit { rewards: vec![], discount: 0.0 },
        algos: Algo::ALL.to_vec(),
        seeds: vec![0, 1, 2],
        data_episodes: 1000,
        epsilon: None,
        eval_episodes: 100,
        mode: EvalMode::Sample,
        beta: None,
        target_return: None,
        train: TrainConfig::default(),
    };
    for (k, v) in pairs {
        let (k, v) = (k.as_str(), v.as_str());
        if env.set(k, v)? {
            continue;
        }
        match k {
            "algos" => {
                sweep.algos = v
                    .split(',')
                    .map(|a| Algo::parse(a.trim()).ok_or_else(|| invalid(format!("unknown algo '{}'", a.trim()))))
                    .collect::<Result<_>>()?
            }
            "seeds" => {
                sweep.seeds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| invalid(format!("seeds: cannot parse '{s}'"))))
                    .collect::<Result<_>>()?
            }
            "data_episodes" => sweep.data_episodes = count(k, v)?,
            "eval_episodes" => sweep.eval_episodes = count(k, v)?,
            "epsilon" => sweep.epsilon = Some(num(k, v)?),
            "mode" => sweep.mode = v.parse().map_err(invalid)?,
            "beta" => sweep.beta = Some(num(k, v)?),
            "target_return" => sweep.target_return = Some(num(k, v)?),
            _ => match k.strip_prefix("train.") {
                Some("gamma") => return Err(invalid("set the discount with the environment key `gamma`".into())),
                Some(key) => sweep.train.set(key, v).map_err(train_error)?,
                None => return Err(invalid(format!("unknown sweep key '{k}'"))),
            },
        }
    }
    sweep.env = env.spec()?.ok_or_else(|| invalid("sweep file needs env = ...".into()))?;
    if sweep.algos.is_empty() || sweep.seeds.is_empty() {
        return Err(invalid("algos and seeds must be non-empty".into()));
    }
    if sweep.eval_episodes == 0 {
        return Err(invalid("eval_episodes must be positive".into()));
    }
    sweep.train.gamma = sweep.env.discount();
    sweep.train.validate().map_err(train_error)?;
    Ok(sweep)
}

/// Independent sub-seed for one use of a sweep seed.
fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run(args: SweepArgs, argv: Vec<String>) -> Result<()> {
    let mut pairs = kv_lines(&read_text(&args.config)?)?;
    pairs.extend(split_set(&args.set)?);
    let sweep = parse_sweep(&pairs)?;

    let run = Run::new(argv, "sweep", None, &args.out, "manifest.json");
    run.execute(|run| {
        run.input(&args.config)?;
        run.manifest.config = serde_json::json!({
            "env_spec": sweep.env,
            "algos": sweep.algos.iter().map(|a| a.name()).collect::<Vec<_>>(),
            "seeds": sweep.seeds,
            "data_episodes": sweep.data_episodes,
            "epsilon": sweep.epsilon,
            "eval_episodes": sweep.eval_episodes,
            "mode": sweep.mode,
            "beta": sweep.beta,
            "target_return": sweep.target_return,
            "train": sweep.train,
        });
        let mut data = Vec::new();
        for &seed in &sweep.seeds {
            let raw = generate(&sweep.env, sweep.data_episodes, derive(seed, 1), sweep.epsilon)?;
            data.push(scaled(&raw, sweep.train.gamma, &mut |w| run.warn(format!("seed {seed}: {w}")))?);
        }
        let mut summaries = Vec::new();
        for &algo in &sweep.algos {
            for (&seed, ds) in sweep.seeds.iter().zip(&data) {
                let (_, featurizer) = dataset_env(ds)?;
                let cfg = TrainConfig { seed: derive(seed, 2), ..sweep.train.clone() };
                let art = train_algo(algo, ds, &featurizer, &cfg)?;
                for w in &art.warnings {
                    run.warn(format!("{} seed {seed}: {w}", algo.name()));
                }
                let beta = sweep.beta.unwrap_or(cfg.beta);
                let report = Evaluation {
                    spec: &sweep.env,
                    model: &art.model,
                    algo,
                    beta,
                    target_return: sweep.target_return,
                    reward_scale: ds.meta().reward_scale,
                    episodes: sweep.eval_episodes,
                    seed: derive(seed, 3),
                    mode: sweep.mode,
                    label: format!("{} seed={seed}", label(algo, beta)),
                }
                .run()?;
                eprintln!("{}: return {:.4}", report.summary.policy, report.summary.mean_return);
                summaries.push(report.summary);
            }
        }
        let table = compare(&summaries).map_err(eval_error)?;
        let mut csv = Vec::new();
        table.write_csv(&mut csv).map_err(eval_error)?;
        run.write("comparison.csv", &csv)?;
        let text = table.to_text();
        run.write("comparison.txt", text.as_bytes())?;
        print!("{text}");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        kv_lines(text).unwrap()
    }

    #[test]
    fn parses_a_full_sweep_file() {
        let s = parse_sweep(&pairs(
            "env = gridworld-stitch\ngrid = 4x4\nalgos = qsft, bc\nseeds = 3,4\nmode = greedy\ntrain.beta = 8\n",
        ))
        .unwrap();
        assert_eq!(s.algos, vec![Algo::Qsft, Algo::Bc]);
        assert_eq!(s.seeds, vec![3, 4]);
        assert_eq!(s.mode, EvalMode::Greedy);
        assert_eq!(s.train.beta, 8.0);
        assert_eq!(s.env, EnvSpec::GridworldStitch { width: 4, height: 4, discount: 0.95 });
    }

    #[test]
    fn rejects_unknown_keys_and_algos() {
        assert!(parse_sweep(&pairs("env = mini-wordle\ncolour = red\n")).is_err());
        assert!(parse_sweep(&pairs("env = mini-wordle\nalgos = qsft,ppo\n")).is_err());
        assert!(parse_sweep(&pairs("algos = qsft\n")).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive(0, 1), derive(0, 2));
        assert_ne!(derive(0, 1), derive(1, 1));
        assert_eq!(derive(5, 3), derive(5, 3));
    }
}
