//! `pdmg`: batch front end for the risk-sensitive game solver.
//!
//! Exit codes: 0 success, 1 a validation or check failed, 2 unreadable or
//! malformed input.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pdmg", version, about = "Risk-sensitive zero-sum games on piecewise deterministic processes")]
struct Cli {
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, env = "PDMG_OUT_DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Solver {
    /// Number of time steps on [0, T].
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Duality-gap tolerance for each matrix game.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SchemeArg {
    SemiLagrangian,
    Picard,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SideArg {
    /// The maximizing (row) player responds.
    Max,
    /// The minimizing (column) player responds.
    Min,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum KindArg {
    /// Nonnegative ladder when costs are nonnegative and Lyapunov data is
    /// present, general ladder otherwise.
    Auto,
    Nonneg,
    General,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a model and check the standing assumptions if it carries
    /// Lyapunov data.
    Validate {
        #[arg(long)]
        model: PathBuf,
        /// Time grid for the assumption checks.
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Solve for the value and saddle strategies; writes solution.csv.
    Solve {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        solver: Solver,
        #[arg(long, value_enum, default_value_t = SchemeArg::SemiLagrangian)]
        scheme: SchemeArg,
    },
    /// Value of a fixed strategy pair; writes evaluation.csv.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Solution CSV with mixture columns.
        #[arg(long)]
        strategies: PathBuf,
        /// Evaluation grid; defaults to the strategy grid.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Optimal one-sided response to a fixed opponent; writes
    /// best_response.csv.
    BestResponse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        strategies: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Monte Carlo estimate of the criterion under a strategy pair; writes
    /// estimate.json and optionally trajectories.csv.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        strategies: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Start state, by name or index.
        #[arg(long)]
        x0: String,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of trajectories to dump.
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Certify a solution: positivity, assumptions, value bounds,
    /// monotonicity and exploitability; writes verify.json.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Solution CSV with the values to check.
        #[arg(long)]
        field: PathBuf,
        /// Strategy CSV; defaults to the mixtures in the field CSV, if any.
        #[arg(long)]
        strategies: Option<PathBuf>,
        /// Evaluation refinement for exploitability.
        #[arg(long, default_value_t = 4)]
        refine: usize,
        /// Largest accepted exploitability, in risk-value units.
        #[arg(long, default_value_t = 2e-3)]
        tol: f64,
        /// Time grid for the assumption checks.
        #[arg(long, default_value_t = 50)]
        check_steps: usize,
    },
    /// Truncation ladder over increasing levels; writes ladder.json.
    Ladder {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated, strictly increasing levels.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<f64>,
        #[arg(long, value_enum, default_value_t = KindArg::Auto)]
        kind: KindArg,
        /// Probe point `t,state`; repeatable.
        #[arg(long)]
        probe: Vec<String>,
        #[command(flatten)]
        solver: Solver,
    },
    /// Solve a matrix game given as CSV rows; writes game.json.
    Game {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Compare a solve with re-solves on a refined grid; writes oracle.json.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        solver: Solver,
        #[arg(long, default_value_t = 8)]
        refine: usize,
        /// Also run Picard iteration on the refined grid.
        #[arg(long)]
        picard: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|cause| {
        cause.downcast_ref::<pdmg_core::Error>().is_some_and(|e| e.is_input_error())
            || cause.downcast_ref::<std::io::Error>().is_some()
    });
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
