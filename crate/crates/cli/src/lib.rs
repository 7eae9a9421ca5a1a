#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Config-driven front end for the `sdstab` library: simulations, certificate
//! fitting and checks, with CSV, JSON and SVG output.

pub mod config;
pub mod error;
pub mod example;
pub mod svg;
pub mod tasks;

use std::path::PathBuf;

use serde::Deserialize;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Simulate,
    FitRepc,
    CheckRepmc,
    FitIss,
    VerifyIss,
    FindTstar,
    Transfer,
    CheckLyapunov,
    Intersample,
    ReproduceExample,
}

impl Task {
    pub const ALL: [Task; 10] = [
        Task::Simulate,
        Task::FitRepc,
        Task::CheckRepmc,
        Task::FitIss,
        Task::VerifyIss,
        Task::FindTstar,
        Task::Transfer,
        Task::CheckLyapunov,
        Task::Intersample,
        Task::ReproduceExample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::FitRepc => "fit-repc",
            Task::CheckRepmc => "check-repmc",
            Task::FitIss => "fit-iss",
            Task::VerifyIss => "verify-iss",
            Task::FindTstar => "find-tstar",
            Task::Transfer => "transfer",
            Task::CheckLyapunov => "check-lyapunov",
            Task::Intersample => "intersample",
            Task::ReproduceExample => "reproduce-example",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// A check failed; the report holds the witness.
    Violation,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub verdict: Verdict,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub plot: bool,
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
}

/// Loads, validates and runs one task.
pub fn run(task: Task, config: &std::path::Path, opts: &RunOptions) -> Result<Outcome> {
    let cfg = ExperimentConfig::load(config)?;
    run_config(task, &cfg, opts)
}

pub fn run_config(task: Task, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate(task)?;
    let out = match (&opts.out, &cfg.output.dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => cfg.resolve(dir),
        (None, None) => cfg.resolve(std::path::Path::new("out")),
    };
    std::fs::create_dir_all(&out).map_err(CliError::io(format!("creating {}", out.display())))?;
    tasks::run(task, cfg, &out, opts.plot)
}
