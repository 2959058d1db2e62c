//! Run manifests and the per-directory lock.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the manifest's directory for outputs; as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: String) -> io::Result<Self> {
        let mut f = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        let mut bytes = 0u64;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(Self { path: recorded_as, sha256: hex::encode(hasher.finalize()), bytes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    /// `ok` or `failed`.
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, subcommand: &str, seed: Option<u64>) -> Self {
        Self {
            tool: "qsft".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            subcommand: subcommand.into(),
            seed,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
            status: "running".into(),
            exit_code: -1,
            error: None,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Recomputes every recorded digest. Output paths resolve against
    /// `manifest_dir`, inputs as recorded. Returns one line per file that is
    /// missing or changed.
    pub fn verify_digests(&self, manifest_dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        let files = self
            .inputs
            .iter()
            .map(|d| (d, PathBuf::from(&d.path)))
            .chain(self.outputs.iter().map(|d| (d, manifest_dir.join(&d.path))));
        for (d, path) in files {
            match FileDigest::of(&path, d.path.clone()) {
                Ok(now) if now.sha256 == d.sha256 && now.bytes == d.bytes => {}
                Ok(_) => bad.push(format!("{}: digest changed", d.path)),
                Err(e) => bad.push(format!("{}: {e}", d.path)),
            }
        }
        bad
    }
}

pub(crate) fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub const LOCK_NAME: &str = ".qsft.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        let path = dir.join(LOCK_NAME);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                io::Error::new(
                    e.kind(),
                    format!("{} exists: another run is writing here (delete it if stale)", path.display()),
                )
            } else {
                e
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
