//! Batch front end of the laboratory: JSON experiment configs in, run
//! directories of CSV tables, JSON reports, field dumps and a hashed
//! manifest out.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod run;

use std::path::PathBuf;

use clap::Parser;
use log::{error, info};

use config::{Command, ExperimentConfig, ValidationErrors};
use run::RunDir;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "vws", version, about = "Numerical laboratory for very weak solutions")]
pub struct Args {
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; must not exist yet. Overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(#[from] ValidationErrors),
    #[error("{0:#}")]
    Pipeline(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

fn thread_cap() -> Result<(), ValidationErrors> {
    let Ok(raw) = std::env::var("VWS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| ValidationErrors(vec![format!("VWS_THREADS = {raw:?} is not a positive integer")]))?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// The effective configuration: file contents with command-line overrides.
pub fn resolve(args: &Args) -> Result<ExperimentConfig, ValidationErrors> {
    let mut cfg = config::load(&args.config)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    Ok(cfg)
}

pub fn execute(args: &Args) -> Result<run::RunManifest, CliError> {
    thread_cap()?;
    let mut cfg = resolve(args)?;
    cfg.validate(args.command)?;
    if args.command == Command::Report {
        report::preflight(&cfg.runs)?;
    }
    cfg.command = Some(args.command);
    let seed = cfg.seed.expect("validated");
    let out = cfg.out.clone().expect("validated");
    let mut dir = RunDir::create(&out).map_err(|e| ValidationErrors(vec![format!("{e:#}")]))?;
    info!("{} -> {}", args.command, out.display());
    let echo = serde_json::to_value(&cfg).map_err(|e| CliError::Pipeline(e.into()))?;
    match pipeline::run(args.command, &cfg, seed, &mut dir) {
        Ok(()) => dir.finish(args.command.name(), seed, echo, None).map_err(CliError::Pipeline),
        Err(e) => {
            let msg = format!("{e:#}");
            error!("{} failed: {msg}", args.command);
            dir.finish(args.command.name(), seed, echo, Some(msg.clone()))
                .map_err(CliError::Pipeline)?;
            Err(CliError::Pipeline(e))
        }
    }
}
