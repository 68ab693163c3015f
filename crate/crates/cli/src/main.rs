use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ffip_cli::{cmd_bench, cmd_cost_report, cmd_simulate, cmd_tile_check, cmd_verify, Outcome, RunConfig};
use ffip_core::gemm::Variant;

#[derive(Parser)]
#[command(name = "ffip", version, about = "Fast inner-product GEMM verification, simulation and cost reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory for reports and CSV files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Equivalence, operation-count, latency and width suites.
    Verify,
    /// Run a GEMM through the MXU simulator and report timing.
    Simulate,
    /// Check convolution tiling against direct convolution.
    TileCheck,
    /// Efficiency metrics and register budgets for recorded design points.
    CostReport,
    /// Wall-clock timings of kernels and simulator.
    Bench,
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(variant) = cli.variant {
        cfg.mxu.variant = variant;
    }
    match cli.command {
        Command::Verify => cmd_verify(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::TileCheck => cmd_tile_check(&cfg),
        Command::CostReport => cmd_cost_report(&cfg),
        Command::Bench => cmd_bench(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.markdown);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
