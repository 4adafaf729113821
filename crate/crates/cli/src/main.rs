//! `hartree-lab`: spectral Monte-Carlo runs for Gaussian random-field
//! equilibria of the Hartree equation.
//!
//! Exit codes: 0 success, 2 hypothesis/validation failure, 3 numerical
//! error, 4 configuration error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hartree_cli::commands::{self, Lab};
use hartree_cli::config::RunConfig;
use hartree_cli::error::{AppError, Result};
use hartree_cli::io::{self, RunDir};

#[derive(Parser)]
#[command(name = "hartree-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides [output].directory)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the ensemble seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted-path config overrides, KEY=VALUE
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify every hypothesis on (f, w) and export the pair kernel
    CheckHypotheses,
    /// Sample the Gaussian equilibrium and report isometry statistics
    SampleEquilibrium,
    /// Tabulate the linear-response symbol and its inversion margin
    ResponseMap,
    /// Cross-check the quadratic term via its three independent routes
    Q2Verify,
    /// Kernel norm-versus-bound table over the scaling family
    KernelBound,
    /// Split-step ensemble evolution of the Hartree flow
    Evolve,
    /// Picard fixed point for the (Z, V) system
    FixedPoint,
    /// Fixed point plus back-propagated scattering trends
    ScatterReport,
    /// Discrete function-space norms of the free perturbation flight
    Norms,
    /// Density operator of the sampled ensemble with Schatten norms
    Density,
    /// Density-matrix scattering residual trend
    CorollaryCheck,
}

fn main() {
    let code = match run() {
        Ok(code) => code,
        Err(e) => {
            io::diag(&format!("error: {}", e.message()));
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| AppError::Config(format!("worker pool: {e}")))?;
    }
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| AppError::Config("missing --config PATH".into()))?;

    let mut overrides: Vec<(String, String)> = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("override '{raw}' is not KEY=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("ensemble.seed".into(), seed.to_string()));
    }

    let cfg = RunConfig::load(config_path, &overrides)?;
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| {
            if cfg.output.directory.is_empty() {
                PathBuf::from("run-out")
            } else {
                PathBuf::from(&cfg.output.directory)
            }
        });
    let lab = Lab::new(cfg.clone())?;
    let mut dir = RunDir::create(&out_dir)?;

    let code = match cli.cmd {
        Cmd::CheckHypotheses => commands::check_hypotheses_cmd(&lab, &mut dir)?,
        Cmd::SampleEquilibrium => commands::sample_equilibrium_cmd(&lab, &mut dir)?,
        Cmd::ResponseMap => commands::response_map_cmd(&lab, &mut dir)?,
        Cmd::Q2Verify => commands::q2_verify_cmd(&lab, &mut dir)?,
        Cmd::KernelBound => commands::kernel_bound_cmd(&lab, &mut dir)?,
        Cmd::Evolve => commands::evolve_cmd(&lab, &mut dir)?,
        Cmd::FixedPoint => commands::fixed_point_cmd(&lab, &mut dir)?,
        Cmd::ScatterReport => commands::scatter_report_cmd(&lab, &mut dir)?,
        Cmd::Norms => commands::norms_cmd(&lab, &mut dir)?,
        Cmd::Density => commands::density_cmd(&lab, &mut dir)?,
        Cmd::CorollaryCheck => commands::corollary_check_cmd(&lab, &mut dir)?,
    };
    dir.finish(&lab.cfg)?;
    Ok(code)
}
