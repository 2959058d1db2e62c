mod eval;
mod gen_data;
mod sweep;
mod train;
mod verify;

use std::path::{Path, PathBuf};

use anyhow::Result;

use crate::args::Command;
use crate::manifest::{now, DirLock, FileDigest, RunManifest};
use crate::{exit_code, Classify, ExitClass};

pub fn dispatch(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data::run(a, argv),
        Command::Train(a) => train::run(a, argv),
        Command::Verify(a) => verify::run(a, argv),
        Command::Eval(a) => eval::run(a, argv),
        Command::Sweep(a) => sweep::run(a, argv),
    }
}

/// One command invocation writing into one directory. Arguments are
/// validated before a `Run` exists, so invalid invocations leave no files;
/// from [`Run::execute`] on, the manifest is written however the body ends.
pub(crate) struct Run {
    pub manifest: RunManifest,
    dir: PathBuf,
    manifest_name: String,
}

impl Run {
    pub fn new(argv: Vec<String>, subcommand: &str, seed: Option<u64>, dir: &Path, manifest_name: &str) -> Self {
        Self {
            manifest: RunManifest::new(argv, subcommand, seed),
            dir: dir.to_path_buf(),
            manifest_name: manifest_name.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let shown = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        let d = FileDigest::of(path, shown.display().to_string())
            .map_err(|e| crate::fail(ExitClass::Io, format!("{}: {e}", path.display())))?;
        self.manifest.inputs.push(d);
        Ok(())
    }

    /// Records a file already written into the run directory.
    pub fn output(&mut self, name: &str) -> Result<()> {
        let d = FileDigest::of(&self.path(name), name.into()).class(ExitClass::Io)?;
        self.manifest.outputs.retain(|o| o.path != name);
        self.manifest.outputs.push(d);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| crate::fail(ExitClass::Io, format!("{}: {e}", path.display())))?;
        self.output(name)
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.manifest.warnings.push(msg);
    }

    /// Creates and locks the directory, runs `body` and writes the manifest
    /// with the outcome.
    pub fn execute(mut self, body: impl FnOnce(&mut Run) -> Result<()>) -> Result<()> {
        std::fs::create_dir_all(&self.dir)
            .map_err(|e| crate::fail(ExitClass::Io, format!("cannot create {}: {e}", self.dir.display())))?;
        let _lock = DirLock::acquire(&self.dir).class(ExitClass::Io)?;
        let outcome = body(&mut self);
        let m = &mut self.manifest;
        m.finished_at = now();
        match &outcome {
            Ok(()) => {
                m.status = "ok".into();
                m.exit_code = 0;
            }
            Err(e) => {
                m.status = "failed".into();
                m.exit_code = exit_code(e);
                m.error = Some(format!("{e:#}"));
            }
        }
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let path = self.path(&self.manifest_name);
        let written = std::fs::write(&path, json)
            .map_err(|e| crate::fail(ExitClass::Io, format!("{}: {e}", path.display())));
        outcome.and(written)
    }
}

/// `key=value` pairs from repeated `--set` flags.
pub(crate) fn split_set(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| crate::fail(ExitClass::InvalidArgument, format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

/// `(key, value)` lines of a plain config file, `#` starting a comment.
pub(crate) fn kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| crate::fail(ExitClass::InvalidArgument, format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| crate::fail(ExitClass::Io, format!("{}: {e}", path.display())))
}
