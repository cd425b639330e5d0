//! `nly2d <subcommand> --config <file> [--out <dir>] [--seed <u64>] [--threads <n>]`
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
//! Failures print one JSON object on stderr.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use serde_json::json;

use commands::{Ctx, SUBCOMMANDS};
use config::{Config, Invalid};
use output::RunDir;

#[derive(Parser, Debug)]
#[command(name = "nly2d", version, about = "Config-driven experiments for two-parameter nonlinear Young equations")]
struct Cli {
    /// One of: sample-field, local-time, averaged-field, sew-demo, solve-nly,
    /// solve-sde, regularity-scan, solve-wave, mollify-study, check-conditions.
    subcommand: String,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default `nly2d-out/<subcommand>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the numerical kernels.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Failure {
    Validation,
    Numerical,
    Io,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Validation => 2,
            Failure::Numerical => 3,
            Failure::Io => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Failure::Validation => "validation",
            Failure::Numerical => "numerical",
            Failure::Io => "io",
        }
    }
}

fn classify(err: &anyhow::Error) -> (Failure, Option<String>) {
    for cause in err.chain() {
        if let Some(inv) = cause.downcast_ref::<Invalid>() {
            return (Failure::Validation, inv.key.clone());
        }
        if let Some(e) = cause.downcast_ref::<nly2d::Error>() {
            return match e {
                nly2d::Error::Io(_) => (Failure::Io, None),
                e if e.is_validation() => (Failure::Validation, None),
                _ => (Failure::Numerical, None),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (Failure::Io, None);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (Failure::Io, None);
        }
    }
    (Failure::Numerical, None)
}

fn execute(cli: &Cli) -> Result<()> {
    if !SUBCOMMANDS.contains(&cli.subcommand.as_str()) {
        return Err(Invalid::at("subcommand", format!("unknown subcommand {:?}; expected one of {SUBCOMMANDS:?}", cli.subcommand)).into());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Invalid::at("--threads", "must be positive").into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let text = std::fs::read_to_string(&cli.config)
        .with_context(|| format!("reading configuration {}", cli.config.display()))?;
    let cfg = Config::parse(&text)?;
    let seed = cli.seed.or(cfg.seed()?).unwrap_or(0);
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("nly2d-out").join(&cli.subcommand));
    let mut out = RunDir::create(&dir)?;
    let mut ctx = Ctx { name: &cli.subcommand, seed, cfg: &cfg, out: &mut out };
    commands::run(&mut ctx)?;
    out.finish(&cli.subcommand, seed, cli.threads, cfg.echo())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, key) = classify(&err);
            let report = json!({
                "status": "error",
                "kind": kind.name(),
                "exit_code": kind.code(),
                "key": key,
                "message": format!("{err:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(kind.code())
        }
    }
}
