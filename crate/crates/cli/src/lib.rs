//! Experiment runner for case-aware adversarial training: `train`, `sweep`,
//! `fig1`, `eval` and `rerun`.

pub mod args;
pub mod run;
pub mod spec;
pub mod summary;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;

use args::{Cli, Command};
use spec::{RunSpec, Settings};

/// Exit status for argument and configuration problems.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cat_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Builds the spec a parsed command describes; `None` for `rerun`.
pub fn resolve(command: &Command) -> Result<Option<RunSpec>, CliError> {
    let (kind, settings) = match command {
        Command::Train(a) => ("train", Settings::merge(a.common.config.as_deref(), a)?),
        Command::Sweep(a) => ("sweep", Settings::merge(a.common.config.as_deref(), a)?),
        Command::Fig1(a) => ("fig1", Settings::merge(a.common.config.as_deref(), a)?),
        Command::Eval(a) => ("eval", Settings::merge(a.common.config.as_deref(), a)?),
        Command::Rerun { .. } => return Ok(None),
    };
    RunSpec::resolve(kind, settings).map(Some)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Rerun { manifest } => run::rerun(manifest),
        other => resolve(other).and_then(|spec| run::execute(&spec.expect("not a rerun"))),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
