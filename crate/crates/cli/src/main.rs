#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::output::{sha256_hex, OutDir};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {issue}")]
    Config { path: PathBuf, issue: config::ConfigIssue },
    #[error("{0}")]
    Setup(String),
    #[error("numerical failure: {0}")]
    Numeric(#[from] cavwave::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config { .. } | CliError::Setup(_) => 2,
            CliError::Numeric(_) | CliError::Failed(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "cavwave", version, about = "Coupled cavity/membrane acoustics solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to output.dir in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override numerics.cavity_modes.
    #[arg(long)]
    modes: Option<usize>,
    /// Suppress the summary line.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coupled iteration and write modal and probe time series.
    Simulate(Common),
    /// Perturbed cavity eigenvalues against a dense eigensolve.
    Eigs(Common),
    /// Magnus convergence certificate and truncation errors.
    MagnusCheck(Common),
    /// Piston-mode reduction and Poincare certificates.
    Piston(Common),
    /// Compare against the 1D finite-difference oracle.
    Validate(Common),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> Result<PathBuf, CliError> {
    if let Some(d) = &common.out {
        return Ok(d.clone());
    }
    let d = cfg
        .output
        .dir
        .as_ref()
        .ok_or_else(|| CliError::Setup("no output directory: pass --out or set output.dir".into()))?;
    let base = common.config.parent().unwrap_or(Path::new("."));
    Ok(base.join(d))
}

fn load(common: &Common) -> Result<(ScenarioConfig, String), CliError> {
    let text = std::fs::read_to_string(&common.config).map_err(io_err(&common.config))?;
    let mut cfg = config::parse(&text).map_err(|issue| CliError::Config {
        path: common.config.clone(),
        issue,
    })?;
    if let Some(m) = common.modes {
        if m == 0 {
            return Err(CliError::Setup("--modes must be at least 1".into()));
        }
        cfg.numerics.cavity_modes = m;
    }
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Eigs(c) => ("eigs", c),
        Command::MagnusCheck(c) => ("magnus-check", c),
        Command::Piston(c) => ("piston", c),
        Command::Validate(c) => ("validate", c),
    };
    let (cfg, sha) = load(common)?;
    let dir = out_dir(common, &cfg)?;
    let mut out = OutDir::create(&dir).map_err(io_err(&dir))?;
    let scenario = match cli.command {
        Command::MagnusCheck(_) => None,
        _ => Some(Scenario::build(&cfg).map_err(|e| CliError::Setup(format!("{}: {e}", common.config.display())))?),
    };
    let outcome = match (&cli.command, &scenario) {
        (Command::MagnusCheck(_), _) => commands::magnus_check(&cfg, &mut out),
        (Command::Simulate(_), Some(sc)) => commands::simulate(&cfg, sc, &mut out),
        (Command::Eigs(_), Some(sc)) => commands::eigs(&cfg, sc, &mut out),
        (Command::Piston(_), Some(sc)) => commands::piston(&cfg, sc, &mut out),
        (Command::Validate(_), Some(sc)) => commands::validate(&cfg, sc, &mut out),
        _ => unreachable!(),
    };
    let outcome = outcome.map_err(|e| match e {
        CliError::Io { source, .. } => CliError::Io {
            path: dir.clone(),
            source,
        },
        e => e,
    })?;

    let grid = scenario.as_ref().map(|sc| json!({ "h": sc.grid.h, "steps": sc.grid.steps, "t_end": cfg.numerics.t_end }));
    let manifest = json!({
        "schema_version": config::SCHEMA_VERSION,
        "tool": "cavwave",
        "version": env!("CARGO_PKG_VERSION"),
        "command": name,
        "config_sha256": sha,
        "cavity_modes": cfg.numerics.cavity_modes,
        "seed": cfg.seed,
        "grid": grid,
        "solver": {
            "cavwave": cavwave::VERSION,
            "patch_modes": cfg.numerics.patch_modes,
            "picard_iterations": cfg.numerics.picard_iterations,
            "step_fraction": cfg.numerics.step_fraction,
            "mass_model": cfg.damping.mass,
            "magnus_quadrature_tol": cavwave::magnus::MAGNUS_TOL,
            "resonance_band": cavwave::coupling::RESONANCE_BAND,
        },
        "tolerances": {
            "validate": cfg.tolerances.validate,
            "eigs": cfg.tolerances.eigs,
            "magnus": cfg.tolerances.magnus,
        },
        "pass": outcome.pass,
        "outputs": out.written.iter().map(|(f, s)| json!({ "file": f, "sha256": s })).collect::<Vec<_>>(),
    });
    out.json("manifest.json", &manifest).map_err(io_err(&dir))?;
    if !common.quiet {
        println!("{}", outcome.summary);
    }
    if outcome.pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{name}: check failed, see {}", dir.display())))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cavwave: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
