//! `avek` — command-line front end for the solver workbench.
//!
//! Exit codes: 0 success, 2 divergence guard, 3 invariant failure, 1 any
//! other error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{SolveOptions, Workspace};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "avek",
    version,
    about = "Iterative solvers for ill-posed operator systems on a circular Radon transform workbench"
)]
struct Cli {
    /// TOML experiment configuration (built-in defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Constant step size override.
    #[arg(long)]
    step: Option<f64>,
    /// Cycle budget override.
    #[arg(long)]
    cycles: Option<usize>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the noisy sinogram and its noise levels.
    #[arg(long)]
    noisy: bool,
    /// Use the exact discrete transpose ("on") or the continuous-adjoint
    /// backprojection ("off") regardless of the configured choice.
    #[arg(long, value_parser = parse_on_off)]
    exact_adjoint: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom image (binary + PGM).
    Phantom,
    /// Compute the noise-free sinogram of the phantom.
    Forward,
    /// Add relative Gaussian noise to the sinogram.
    Noise,
    /// Run one solver; writes trace.csv, summary.json and reconstructions.
    Solve {
        /// landweber | kaczmarz | avek | iag | landweber-emr0/1 | kaczmarz-emr0/1
        #[arg(long)]
        method: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run several solvers and write an aligned comparison CSV.
    Compare {
        /// Comma-separated method list (configured list when omitted).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the deterministic invariant battery over all modules.
    Selftest {
        /// Fault injection: corrupt one adjoint so the battery must notice.
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Certify the adjoint pair by dot-product tests.
    AdjointCheck {
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 32)]
        detectors: usize,
        #[arg(long, default_value_t = 64)]
        radial: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected \"on\" or \"off\", got {other:?}")),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<u8> {
    let config = load_config(cli.config.as_ref())?;
    let ws = Workspace::new(config, cli.out);
    match cli.command {
        Command::Phantom => {
            commands::cmd_phantom(&ws)?;
            Ok(0)
        }
        Command::Forward => {
            commands::cmd_forward(&ws)?;
            Ok(0)
        }
        Command::Noise => {
            commands::cmd_noise(&ws)?;
            Ok(0)
        }
        Command::Solve { method, run } => {
            let method = config::parse_method(&method)?;
            commands::cmd_solve(
                &ws,
                SolveOptions {
                    method,
                    noisy: run.noisy,
                    step: run.step,
                    cycles: run.cycles,
                    seed: run.seed,
                    exact_adjoint: run.exact_adjoint,
                },
            )
        }
        Command::Compare { methods, run } => {
            commands::cmd_compare(&ws, &methods, run.noisy, run.cycles, run.exact_adjoint)
        }
        Command::Selftest { corrupt_adjoint } => Ok(commands::cmd_selftest(corrupt_adjoint)),
        Command::AdjointCheck {
            grid,
            detectors,
            radial,
            blocks,
        } => commands::cmd_adjoint_check(grid, detectors, radial, blocks),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit with 2, which is reserved for the divergence
            // guard here.
            let message = e.render();
            if e.use_stderr() {
                eprint!("{message}");
                return ExitCode::from(1);
            }
            print!("{message}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
