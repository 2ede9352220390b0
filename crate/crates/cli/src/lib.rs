//! Command-line experiment drivers for the quasihom solvers.
//!
//! `quasihom <experiment> [--config FILE] [--key value ...] [--jobs N] [--out DIR]`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod svg;
pub mod table;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use config::{Experiment, RunConfig};
pub use experiments::Outcome;

/// Environment variable naming the basis cache directory.
pub const CACHE_ENV: &str = "QUASIHOM_CACHE";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn output(path: &Path, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Plot(_) | CliError::Output { .. } => 1,
        }
    }
}

pub fn usage() -> String {
    let mut s = String::from(
        "usage: quasihom <experiment> [--config FILE] [--key value ...] [--jobs N] [--out DIR]\n\nexperiments:",
    );
    for e in Experiment::ALL {
        s.push(' ');
        s.push_str(e.name());
    }
    s.push_str("\n\nkeys (default):\n");
    for (k, d, help) in config::KEYS {
        s.push_str(&format!("  {k:<24} {help} ({})\n", if d.is_empty() { "unset" } else { d }));
    }
    s.push_str(&format!("\n{CACHE_ENV} names a directory for cached coarse bases.\n"));
    s
}

/// Parses the arguments after the program name, runs the experiment and
/// writes its artifacts.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<Outcome, CliError> {
    let mut args = args.into_iter();
    let name = args
        .next()
        .ok_or_else(|| CliError::Config(format!("missing experiment\n\n{}", usage())))?;
    let experiment = Experiment::parse(&name)
        .ok_or_else(|| CliError::Config(format!("unknown experiment {name:?}\n\n{}", usage())))?;
    let parsed = config::parse_args(args)?;
    let cache = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = config::resolve(experiment, &parsed, cache)?;

    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::output(&cfg.out, e))?;
    let resolved = cfg.out.join("config.txt");
    config::write_resolved(&cfg, &resolved).map_err(|e| CliError::output(&resolved, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
    let mut outcome = pool.install(|| experiments::run_experiment(&cfg))?;

    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    outcome.summary.metadata = vec![
        ("experiment".into(), experiment.name().into()),
        ("fingerprint".into(), format!("{:016x}", cfg.fingerprint())),
        ("timestamp".into(), stamp.to_string()),
    ];
    let meta = cfg.out.join("run.txt");
    let mut text: String = outcome.summary.metadata.iter().map(|(k, v)| format!("{k}: {v}\n")).collect();
    for f in &outcome.files {
        text.push_str(&format!("file: {}\n", f.display()));
    }
    std::fs::write(&meta, text).map_err(|e| CliError::output(&meta, e))?;
    outcome.files.push(resolved);
    outcome.files.push(meta);
    Ok(outcome)
}
