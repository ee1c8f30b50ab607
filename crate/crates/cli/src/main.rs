use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{exit_code, InvariantFailure};
use config::{ExperimentConfig, Overrides};

const DEFAULT_VERIFY_SEED: u64 = 0;

/// Mirror descent implicit-bias experiments.
///
/// Exit codes: 0 success, 1 validation error, 2 invariant failure,
/// 3 infeasible (non-separable) data.
#[derive(Debug, Parser)]
#[command(name = "mdbias", version)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the run seed and the dataset seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding `outputs.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Parallel sweep cells (default: available cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    record_every: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// One trajectory: trace.csv and summary.json.
    Run,
    /// One trajectory per `[sweep]` value, plus a norm table.
    Sweep,
    /// Max-margin direction of the configured potential.
    Maxmargin,
    /// Regularization path over `path.budgets`.
    Path,
    /// Identity suite over seeded random instances.
    Verify {
        #[arg(long, hide = true)]
        mutant: bool,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => bail!("--config PATH is required"),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        record_every: cli.record_every,
    });
    Ok(cfg)
}

fn real(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run => {
            let s = commands::cmd_run(&load(&cli)?)?;
            println!(
                "t={} loss={:e} psi_norm={:e} margin={:e} gap={}",
                s.final_t,
                s.final_loss,
                s.final_psi_norm,
                s.final_margin,
                s.final_bregman_gap.map_or("-".into(), |g| format!("{g:e}"))
            );
        }
        Cmd::Sweep => {
            let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if workers == 0 {
                bail!("--workers must be >= 1");
            }
            let r = commands::cmd_sweep(&load(&cli)?, workers)?;
            for c in &r.cells {
                match (&c.summary, &c.error) {
                    (Some(s), _) => println!("{}={}: loss={:e} gap={:?}", r.axis, c.value, s.final_loss, s.final_bregman_gap),
                    (_, Some(e)) => println!("{}={}: FAILED {e}", r.axis, c.value),
                    _ => {}
                }
            }
            if !r.column_minimizers.is_empty() {
                println!("column minimizers: {:?}", r.column_minimizers);
            }
            let failed = r.failed_cells();
            if failed > 0 {
                return Err(InvariantFailure(format!("{failed} of {} sweep cells failed", r.cells.len())).into());
            }
        }
        Cmd::Maxmargin => {
            let r = commands::cmd_maxmargin(&load(&cli)?)?;
            println!("direction={:?} margin={:e} lp_margin={:e} gap={:e}", r.direction, r.margin_value, r.lp_margin, r.solver_gap);
        }
        Cmd::Path => {
            let n = commands::cmd_path(&load(&cli)?)?;
            println!("{n} path points");
        }
        Cmd::Verify { mutant } => {
            let seed = cli.seed.unwrap_or(DEFAULT_VERIFY_SEED);
            let r = commands::cmd_verify(seed, mutant, cli.out.as_deref())?;
            for c in &r.checks {
                println!(
                    "{} {:<20} {:>5} instances {:>5} failures  max error {:.3e} (tol {:.0e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.instances,
                    c.failures,
                    c.max_error,
                    c.tolerance
                );
            }
            if !r.passed() {
                return Err(InvariantFailure("identity suite failed".into()).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match real(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
