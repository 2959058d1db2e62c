use anyhow::Result;
use qsft_core::algorithms::{filtered_bc, train_bc, train_qsft, train_rcsl, train_td_q, Algo, TrainConfig, TrainError, TrainedArtifacts};
use qsft_core::dataset::{scale_rewards, DatasetError};
use qsft_core::envs::EnvSpec;
use qsft_core::features::Featurizer;
use qsft_core::Dataset;

use super::gen_data::DataLayout;
use super::{kv_lines, read_text, split_set, Run};
use crate::args::TrainArgs;
use crate::{fail, ExitClass};

pub(crate) fn train_error(e: TrainError) -> anyhow::Error {
    let class = match &e {
        TrainError::Divergence { .. } => ExitClass::Divergence,
        TrainError::Config(_)
        | TrainError::EmptyDataset
        | TrainError::NotScaled { .. }
        | TrainError::FilteredEmpty
        | TrainError::Features(_) => ExitClass::InvalidArgument,
        _ => return e.into(),
    };
    anyhow::Error::new(e).context(class)
}

fn dataset_error(e: DatasetError) -> anyhow::Error {
    let class = if matches!(e, DatasetError::Io(_)) { ExitClass::Io } else { ExitClass::InvalidArgument };
    anyhow::Error::new(e).context(class)
}

/// Featurizer for a dataset whose metadata records its environment.
pub(crate) fn dataset_env(ds: &Dataset) -> Result<(EnvSpec, Featurizer)> {
    let spec = ds
        .meta()
        .env_spec
        .clone()
        .ok_or_else(|| fail(ExitClass::InvalidArgument, "dataset metadata names no environment spec"))?;
    let model = spec.build().map_err(|e| fail(ExitClass::InvalidArgument, e))?;
    Ok((spec, model.featurizer()))
}

/// Rescales rewards to discounted returns within 1 when needed.
pub(crate) fn scaled(ds: &Dataset, gamma: f64, warn: &mut dyn FnMut(String)) -> Result<Dataset> {
    let (out, factor) = scale_rewards(ds, gamma).map_err(dataset_error)?;
    if factor > 1.0 {
        warn(format!("rewards divided by {factor} so every discounted return is at most 1"));
    }
    Ok(out)
}

pub(crate) fn train_algo(algo: Algo, ds: &Dataset, f: &Featurizer, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    let r = match algo {
        Algo::Qsft => train_qsft(ds, f, cfg),
        Algo::Bc => train_bc(ds, f, cfg),
        Algo::Tdq => train_td_q(ds, f, cfg),
        Algo::FilteredBc => filtered_bc(ds, f, cfg),
        Algo::Rcsl => train_rcsl(ds, f, cfg),
    };
    r.map_err(train_error)
}

pub fn run(args: TrainArgs, argv: Vec<String>) -> Result<()> {
    let algo = Algo::from(args.algo);
    let mut cfg = TrainConfig::default();
    let mut gamma_explicit = false;
    let mut apply = |cfg: &mut TrainConfig, k: &str, v: &str| -> Result<()> {
        gamma_explicit |= k == "gamma";
        cfg.set(k, v).map_err(train_error)
    };
    if let Some(path) = &args.config {
        for (k, v) in kv_lines(&read_text(path)?)? {
            apply(&mut cfg, &k, &v)?;
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for (k, v) in split_set(&args.set)? {
        apply(&mut cfg, &k, &v)?;
    }
    cfg.validate().map_err(train_error)?;

    let layout = DataLayout::for_input(&args.data);
    let (data_path, meta_path) = (layout.dir.join(&layout.data), layout.dir.join(&layout.meta));
    let ds = Dataset::load(&data_path, &meta_path).map_err(dataset_error)?;
    let (spec, featurizer) = dataset_env(&ds)?;

    let run = Run::new(argv, "train", Some(cfg.seed), &args.out, "manifest.json");
    run.execute(|run| {
        run.input(&data_path)?;
        run.input(&meta_path)?;
        if let Some(path) = &args.config {
            run.input(path)?;
        }
        let data_gamma = ds.meta().gamma;
        if (cfg.gamma - data_gamma).abs() > 1e-12 {
            if gamma_explicit {
                run.warn(format!("config gamma {} differs from dataset gamma {data_gamma}; using {}", cfg.gamma, cfg.gamma));
            } else {
                cfg.gamma = data_gamma;
            }
        }
        run.manifest.config = serde_json::json!({
            "algo": algo.name(),
            "train": cfg,
            "env_spec": spec,
        });
        let ds = scaled(&ds, cfg.gamma, &mut |w| run.warn(w))?;
        let art = train_algo(algo, &ds, &featurizer, &cfg)?;
        for w in &art.warnings {
            run.warn(w.clone());
        }
        let extra = serde_json::json!({
            "env_spec": spec,
            "reward_scale": ds.meta().reward_scale,
            "data_sha256": run.manifest.inputs[0].sha256,
        });
        art.model
            .save(&run.path("ckpt.bin"), algo, &cfg, art.total_updates() as u64, extra)
            .map_err(|e| fail(ExitClass::Io, e))?;
        run.output("ckpt.bin")?;
        run.write("losses.csv", art.losses_csv().as_bytes())?;
        let last: Vec<String> = art
            .curves
            .iter()
            .map(|c| format!("{} {:.4}", c.phase, c.iteration_means(cfg.updates_per_iteration).last().copied().unwrap_or(f64::NAN)))
            .collect();
        println!("trained {} for {} updates (final loss: {})", algo.name(), art.total_updates(), last.join(", "));
        Ok(())
    })
}
