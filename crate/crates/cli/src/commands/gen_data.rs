use std::path::{Path, PathBuf};

use anyhow::Result;
use qsft_core::envs::{gen_stitch_dataset, rollout_dataset, EnvError, EnvSpec, GeneratorPolicy};
use qsft_core::Dataset;

use super::Run;
use crate::args::GenDataArgs;
use crate::{fail, ExitClass};

const DEFAULT_EPSILON: f64 = 0.5;

/// Where a dataset and its sidecars live: `dir/dataset.jsonl` with
/// `meta.json`, or `X.jsonl` with `X.meta.json`.
pub(crate) struct DataLayout {
    pub dir: PathBuf,
    pub data: String,
    pub meta: String,
    pub manifest: String,
}

impl DataLayout {
    pub fn for_output(out: &Path) -> Self {
        if out.extension().is_some_and(|e| e == "jsonl") {
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
            Self {
                dir,
                data: format!("{stem}.jsonl"),
                meta: format!("{stem}.meta.json"),
                manifest: format!("{stem}.manifest.json"),
            }
        } else {
            Self { dir: out.to_path_buf(), data: "dataset.jsonl".into(), meta: "meta.json".into(), manifest: "manifest.json".into() }
        }
    }

    /// Layout of an existing dataset. A `.jsonl` without its own sidecar
    /// falls back to `meta.json` beside it.
    pub fn for_input(path: &Path) -> Self {
        let mut l = Self::for_output(path);
        if path.extension().is_some_and(|e| e == "jsonl") && !l.dir.join(&l.meta).exists() {
            l.meta = "meta.json".into();
        }
        l
    }
}

/// Generates `episodes` trajectories. Gridworld-stitch without `epsilon`
/// emits its two families in equal numbers.
pub(crate) fn generate(spec: &EnvSpec, episodes: usize, seed: u64, epsilon: Option<f64>) -> Result<Dataset> {
    if episodes == 0 {
        return Err(fail(ExitClass::InvalidArgument, "--episodes must be positive"));
    }
    let result = match (spec, epsilon) {
        (EnvSpec::GridworldStitch { .. }, None) => {
            if episodes % 2 == 1 {
                return Err(fail(
                    ExitClass::InvalidArgument,
                    "gridworld-stitch family data needs an even episode count (two equal families)",
                ));
            }
            let model = spec.build().map_err(|e| fail(ExitClass::InvalidArgument, e))?;
            gen_stitch_dataset(model.grid().expect("stitch env has a grid"), episodes / 2, seed)
        }
        _ => {
            let gen = GeneratorPolicy::new(epsilon.unwrap_or(DEFAULT_EPSILON)).map_err(|e| fail(ExitClass::InvalidArgument, e))?;
            rollout_dataset(spec, gen, episodes, seed)
        }
    };
    result.map_err(|e| match e {
        EnvError::Params(_) | EnvError::NoEpisodes => fail(ExitClass::InvalidArgument, e),
        other => anyhow::Error::new(other),
    })
}

pub fn run(args: GenDataArgs, argv: Vec<String>) -> Result<()> {
    let spec = args.env.spec()?.ok_or_else(|| fail(ExitClass::InvalidArgument, "--env is required"))?;
    if args.episodes == 0 {
        return Err(fail(ExitClass::InvalidArgument, "--episodes must be positive"));
    }
    if let Some(e) = args.epsilon {
        GeneratorPolicy::new(e).map_err(|e| fail(ExitClass::InvalidArgument, e))?;
    }
    if matches!(spec, EnvSpec::GridworldStitch { .. }) && args.epsilon.is_none() && args.episodes % 2 == 1 {
        return Err(fail(ExitClass::InvalidArgument, "gridworld-stitch family data needs an even --episodes"));
    }
    let layout = DataLayout::for_output(&args.out);
    let run = Run::new(argv, "gen-data", Some(args.seed), &layout.dir, &layout.manifest);
    run.execute(|run| {
        run.manifest.config = serde_json::json!({
            "env_spec": spec,
            "episodes": args.episodes,
            "epsilon": args.epsilon,
        });
        let ds = generate(&spec, args.episodes, args.seed, args.epsilon)?;
        run.write(&layout.data, &ds.to_jsonl_bytes())?;
        run.write(&layout.meta, &serde_json::to_vec_pretty(ds.meta())?)?;
        println!(
            "wrote {} trajectories ({} transitions) to {}",
            ds.num_trajectories(),
            ds.len(),
            run.path(&layout.data).display()
        );
        Ok(())
    })
}
