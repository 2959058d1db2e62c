use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use qsft_cli::RunManifest;
use serde_json::Value;

fn qsft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsft")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = qsft(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn manifest(path: &Path) -> RunManifest {
    RunManifest::load(path).unwrap()
}

fn stitch_data(dir: &Path, episodes: &str) {
    ok(dir, &["gen-data", "--env", "gridworld-stitch", "--grid", "4", "4", "--episodes", episodes, "--seed", "7", "--out", "d.jsonl"]);
}

#[test]
fn gen_data_writes_requested_trajectories_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-data", "--env", "gridworld-stitch", "--episodes", "500", "--seed", "7", "--out", "d.jsonl"]);
    let text = std::fs::read_to_string(dir.join("d.jsonl")).unwrap();
    let ids: BTreeSet<u64> = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["traj_id"].as_u64().unwrap()).collect();
    assert_eq!(ids.len(), 500);
    assert_eq!(json(&dir.join("d.meta.json"))["num_trajectories"], 500);

    ok(dir, &["gen-data", "--env", "gridworld-stitch", "--episodes", "500", "--seed", "7", "--out", "again"]);
    assert_eq!(std::fs::read(dir.join("d.jsonl")).unwrap(), std::fs::read(dir.join("again/dataset.jsonl")).unwrap());
    assert_eq!(std::fs::read(dir.join("d.meta.json")).unwrap(), std::fs::read(dir.join("again/meta.json")).unwrap());

    let m = manifest(&dir.join("d.manifest.json"));
    assert_eq!((m.status.as_str(), m.exit_code, m.seed), ("ok", 0, Some(7)));
    assert_eq!(m.outputs.len(), 2);
    assert!(m.verify_digests(dir).is_empty());
    assert!(!dir.join(".qsft.lock").exists());

    ok(dir, &["gen-data", "--env", "mini-wordle", "--episodes", "20", "--epsilon", "0.5", "--out", "w"]);
    ok(dir, &["gen-data", "--env", "random-mdp", "--states", "6", "--episodes", "20", "--out", "r"]);
}

#[test]
fn gen_data_rejects_bad_arguments_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        &["gen-data", "--env", "gridworld-stitch", "--episodes", "0", "--out", "z.jsonl"][..],
        &["gen-data", "--env", "chess", "--episodes", "10", "--out", "z.jsonl"],
        &["gen-data", "--env", "gridworld-stitch", "--episodes", "5", "--out", "z.jsonl"],
        &["gen-data", "--env", "mini-wordle", "--grid", "3", "3", "--episodes", "4", "--out", "z.jsonl"],
        &["gen-data", "--env", "mini-wordle", "--epsilon", "2", "--episodes", "4", "--out", "z.jsonl"],
    ] {
        assert_eq!(code(&qsft(dir, args)), 2, "{args:?}");
    }
    assert_eq!(std::fs::read_dir(dir).unwrap().count(), 0);
}

#[test]
fn gen_data_reports_unwritable_output_as_io() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("file"), b"x").unwrap();
    let out = qsft(tmp.path(), &["gen-data", "--env", "mini-wordle", "--episodes", "4", "--out", "file/sub"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_writes_checkpoint_curves_and_manifest_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    stitch_data(dir, "100");
    std::fs::write(dir.join("cfg.txt"), "beta = 2.0\niterations = 5\ngamma = 0.9\n").unwrap();
    ok(dir, &["train", "--algo", "qsft", "--data", "d.jsonl", "--config", "cfg.txt", "--out", "run", "--set", "beta=8.0"]);
    for f in ["ckpt.bin", "losses.csv", "manifest.json"] {
        assert!(dir.join("run").join(f).is_file(), "{f}");
    }
    let losses = std::fs::read_to_string(dir.join("run/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 * 5 * 60);
    let m = manifest(&dir.join("run/manifest.json"));
    assert_eq!(m.config["train"]["beta"], 8.0);
    // explicit gamma beats the dataset's, with a warning
    assert_eq!(m.config["train"]["gamma"], 0.9);
    assert!(m.warnings.iter().any(|w| w.contains("gamma")), "{:?}", m.warnings);
    assert_eq!(m.inputs.len(), 3);
    assert!(m.verify_digests(&dir.join("run")).is_empty());

    // without an explicit gamma the dataset's is adopted silently
    ok(dir, &["train", "--algo", "bc", "--data", "d.jsonl", "--out", "bc", "--set", "iterations=2"]);
    let m = manifest(&dir.join("bc/manifest.json"));
    assert_eq!(m.config["train"]["gamma"], 0.95);
    assert!(m.warnings.is_empty());
}

#[test]
fn train_rejects_bad_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    stitch_data(dir, "20");
    assert_eq!(code(&qsft(dir, &["train", "--algo", "ppo", "--data", "d.jsonl", "--out", "x"])), 2);
    assert_eq!(code(&qsft(dir, &["train", "--algo", "bc", "--data", "d.jsonl", "--out", "x", "--set", "nope=1"])), 2);
    assert_eq!(code(&qsft(dir, &["train", "--algo", "bc", "--data", "d.jsonl", "--out", "x", "--set", "polyak=0"])), 2);
    assert_eq!(code(&qsft(dir, &["train", "--algo", "bc", "--data", "missing.jsonl", "--out", "x"])), 3);
    assert!(!dir.join("x").exists());
}

#[test]
fn divergence_exits_5_and_still_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    stitch_data(dir, "20");
    let out = qsft(dir, &["train", "--algo", "tdq", "--data", "d.jsonl", "--out", "run", "--set", "lr_likelihood=1e300"]);
    assert_eq!(code(&out), 5);
    let m = manifest(&dir.join("run/manifest.json"));
    assert_eq!((m.status.as_str(), m.exit_code), ("failed", 5));
    assert!(m.error.unwrap().contains("diverged"));
    assert!(!dir.join("run/.qsft.lock").exists());
}

#[test]
fn verify_exit_code_tracks_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = qsft(dir, &["verify", "--seeds", "12", "--max-states", "8", "--out", "v"]);
    let report = json(&dir.join("v/report.json"));
    let violations = report["violations"].as_array().unwrap();
    assert_eq!(code(&out), if violations.is_empty() { 0 } else { 4 });
    for v in violations {
        assert!(v["seed"].is_u64() && v["state"].is_u64() && v["action"].is_u64());
    }
    assert_eq!(report["cases"].as_array().unwrap().len(), 12);
    assert!(String::from_utf8_lossy(&out.stdout).contains("qualifying pairs"));

    ok(dir, &["verify", "--seeds", "4", "--actions", "2..2", "--out", "two"]);
    let warnings = json(&dir.join("two/report.json"))["warnings"].clone();
    assert!(warnings.as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("1/(|A|-1)")));

    assert_eq!(code(&qsft(dir, &["verify", "--tol", "-1", "--out", "bad"])), 2);
    assert_eq!(code(&qsft(dir, &["verify", "--gamma", "1.0", "--out", "bad"])), 2);
    assert_eq!(code(&qsft(dir, &["verify", "--actions", "5..3", "--out", "bad"])), 2);
    assert!(!dir.join("bad").exists());
}

#[test]
fn eval_reports_episodes_and_extraction_at_zero_beta_matches_bc() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    stitch_data(dir, "100");
    let short = ["--set", "iterations=20", "--seed", "3"];
    ok(dir, &[&["train", "--algo", "qsft", "--data", "d.jsonl", "--out", "q"][..], &short].concat());
    ok(dir, &[&["train", "--algo", "bc", "--data", "d.jsonl", "--out", "b"][..], &short].concat());

    ok(dir, &["eval", "--checkpoint", "q/ckpt.bin", "--episodes", "100", "--seed", "5", "--beta", "0", "--out", "eq"]);
    ok(dir, &["eval", "--checkpoint", "b/ckpt.bin", "--episodes", "100", "--seed", "5", "--out", "eb"]);
    let csv = std::fs::read_to_string(dir.join("eq/episodes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    let (q, b) = (json(&dir.join("eq/summary.json")), json(&dir.join("eb/summary.json")));
    assert_eq!(q["episodes"], 100);
    let (rq, rb) = (q["mean_return"].as_f64().unwrap(), b["mean_return"].as_f64().unwrap());
    assert!((rq - rb).abs() <= 1e-9, "beta=0 {rq} vs bc {rb}");
    assert!(manifest(&dir.join("eq/manifest.json")).verify_digests(&dir.join("eq")).is_empty());

    // rerun is byte-identical
    ok(dir, &["eval", "--checkpoint", "q/ckpt.bin", "--episodes", "100", "--seed", "5", "--beta", "0", "--out", "eq2"]);
    assert_eq!(std::fs::read(dir.join("eq/episodes.csv")).unwrap(), std::fs::read(dir.join("eq2/episodes.csv")).unwrap());
    assert_eq!(std::fs::read(dir.join("eq/summary.json")).unwrap(), std::fs::read(dir.join("eq2/summary.json")).unwrap());
}

#[test]
fn eval_rejects_missing_and_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&qsft(dir, &["eval", "--checkpoint", "nope.bin", "--out", "e"])), 3);
    stitch_data(dir, "20");
    ok(dir, &["train", "--algo", "bc", "--data", "d.jsonl", "--out", "b", "--set", "iterations=1"]);
    let wide = qsft(dir, &["eval", "--checkpoint", "b/ckpt.bin", "--env", "gridworld-stitch", "--grid", "5", "5", "--out", "e"]);
    assert_eq!(code(&wide), 2, "{}", String::from_utf8_lossy(&wide.stderr));
    assert_eq!(code(&qsft(dir, &["eval", "--checkpoint", "b/ckpt.bin", "--episodes", "0", "--out", "e"])), 2);
}

#[test]
fn sweep_produces_one_row_per_method_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("sweep.txt"),
        "env = gridworld-stitch\ngrid = 4x4\nalgos = qsft, bc, rcsl, filtered-bc, tdq\nseeds = 0, 1, 2\n\
         data_episodes = 40\neval_episodes = 10\nmode = greedy\ntrain.iterations = 2\ntrain.beta = 8\n",
    )
    .unwrap();
    ok(dir, &["sweep", "--config", "sweep.txt", "--out", "s"]);
    let csv = std::fs::read_to_string(dir.join("s/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
    for algo in ["qsft", "bc", "rcsl", "filtered-bc", "tdq"] {
        assert_eq!(csv.lines().filter(|l| l.starts_with(algo)).count(), 3, "{algo}");
    }
    assert!(dir.join("s/comparison.txt").is_file());
    ok(dir, &["sweep", "--config", "sweep.txt", "--out", "s2"]);
    assert_eq!(csv, std::fs::read_to_string(dir.join("s2/comparison.csv")).unwrap());

    assert_eq!(code(&qsft(dir, &["sweep", "--config", "sweep.txt", "--out", "x", "--set", "algos=ppo"])), 2);
    assert_eq!(code(&qsft(dir, &["sweep", "--config", "missing.txt", "--out", "x"])), 3);
}

#[test]
fn a_held_lock_blocks_a_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir(dir.join("busy")).unwrap();
    std::fs::write(dir.join("busy/.qsft.lock"), b"1\n").unwrap();
    let out = qsft(dir, &["gen-data", "--env", "mini-wordle", "--episodes", "4", "--out", "busy"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("another run"));
    assert!(dir.join("busy/.qsft.lock").exists());
    assert!(!dir.join("busy/dataset.jsonl").exists());
}

#[test]
fn tampered_outputs_fail_digest_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-data", "--env", "mini-wordle", "--episodes", "6", "--out", "w"]);
    let m = manifest(&dir.join("w/manifest.json"));
    assert!(m.verify_digests(&dir.join("w")).is_empty());
    std::fs::write(dir.join("w/meta.json"), b"{}").unwrap();
    assert_eq!(m.verify_digests(&dir.join("w")), vec!["meta.json: digest changed".to_string()]);
}
