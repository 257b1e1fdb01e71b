//! Experiment orchestration for `sdeflow`: configuration, seed derivation,
//! subcommand dispatch and reproducible outputs.

// `!(x > 0.0)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;
pub mod suite;

use std::path::Path;
use std::time::Instant;

use sdeflow_core::FlowError;
use thiserror::Error;

pub use config::{ExperimentConfig, Knobs, SUBCOMMANDS};
pub use output::{Check, Outcome, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure in {stage}: {source}")]
    Numerical {
        stage: String,
        #[source]
        source: FlowError,
    },
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numerical { .. } => 3,
            CliError::Acceptance(_) => 4,
        }
    }

    fn stage(&self) -> Option<&str> {
        match self {
            CliError::Numerical { stage, .. } => Some(stage),
            CliError::Config(_) => Some("config"),
            CliError::Io { .. } => Some("output"),
            CliError::Acceptance(_) => None,
        }
    }
}

/// Attaches a stage name to core errors.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for Result<T, FlowError> {
    fn stage(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Numerical {
            stage: stage.to_string(),
            source,
        })
    }
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Validates `cfg`, runs `subcommand` on a pool of `cfg.workers()` threads
/// and writes the CSV payloads, `summary.csv` and `manifest.json` under the
/// output directory. The manifest is written on failure too.
pub fn run(subcommand: &str, cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut echo = cfg.clone();
    echo.subcommand = Some(subcommand.to_string());
    let out = cfg.out_dir(subcommand);
    let mut manifest = RunManifest::new(subcommand, &echo);

    let result = cfg.validate(subcommand).and_then(|_| {
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers())
            .build()
            .map_err(|e| CliError::Config(format!("`workers`: {e}")))?;
        pool.install(|| commands::dispatch(subcommand, cfg, &out))
    });
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();

    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            manifest.fail(e.stage(), &e.to_string());
            // an unusable output directory leaves nowhere to report to
            if std::fs::create_dir_all(&out).is_ok() {
                manifest.write(&out)?;
            }
            return Err(e);
        }
    };
    outcome.write(&out)?;
    manifest.absorb(&outcome);
    let failed: Vec<String> = outcome
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    if !failed.is_empty() {
        manifest.status = "acceptance-failed".into();
    }
    manifest.write(&out)?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(CliError::Acceptance(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
