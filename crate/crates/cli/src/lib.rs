//! `qsft` command-line runner: dataset generation, training, bound
//! verification, evaluation and method sweeps, each leaving a manifest that
//! records inputs, outputs and their digests.

mod args;
mod commands;
mod envargs;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;
use qsft_core::algorithms::TrainError;
use qsft_core::dataset::DatasetError;

pub use manifest::{FileDigest, RunManifest};

/// Error classes with their own exit codes. Attached to an error chain as
/// context; anything unclassified exits with 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    InvalidArgument,
    Io,
    Verification,
    Divergence,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::InvalidArgument => 2,
            ExitClass::Io => 3,
            ExitClass::Verification => 4,
            ExitClass::Divergence => 5,
        }
    }
}

impl fmt::Display for ExitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExitClass::InvalidArgument => "invalid argument",
            ExitClass::Io => "I/O error",
            ExitClass::Verification => "verification failed",
            ExitClass::Divergence => "training diverged",
        })
    }
}

pub(crate) fn fail(class: ExitClass, msg: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("{msg}").context(class)
}

pub(crate) trait Classify<T> {
    fn class(self, class: ExitClass) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, class: ExitClass) -> anyhow::Result<T> {
        self.map_err(|e| e.into().context(class))
    }
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(c) = err.downcast_ref::<ExitClass>() {
        return c.code();
    }
    for cause in err.chain() {
        if let Some(TrainError::Divergence { .. }) = cause.downcast_ref::<TrainError>() {
            return ExitClass::Divergence.code();
        }
        if cause.is::<std::io::Error>() || matches!(cause.downcast_ref::<DatasetError>(), Some(DatasetError::Io(_))) {
            return ExitClass::Io.code();
        }
    }
    1
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
