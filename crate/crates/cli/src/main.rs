//! `cardtrack`: dataset conversion, backtests, sensitivity sweeps and
//! reports for cardinality-constrained index tracking.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{ReportArgs, SweepFlags};
use crate::config::RunFlags;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cardtrack", version, about)]
struct Cli {
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a dataset into canonical panel.csv and membership.csv.
    Convert {
        input: PathBuf,
        /// Input layout: canonical, long or public.
        #[arg(long)]
        layout: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Header of the index column in the public layout.
        #[arg(long)]
        index_column: Option<String>,
    },
    /// Run one rolling backtest.
    Backtest(RunFlags),
    /// Run a grid of estimation periods, evaluation periods and enhancement
    /// levels.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        grid: SweepFlags,
    },
    /// Build summary tables from one or more run directories.
    Report(ReportArgs),
    /// Check recovery of the known basket on the built-in synthetic data.
    Selftest {
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn init_workers(n: Option<usize>) {
    if let Some(n) = n.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Convert {
            input,
            layout,
            out_dir,
            index_column,
        } => commands::convert(&input, &layout, &out_dir, index_column.as_deref()),
        Command::Backtest(flags) => {
            init_workers(workers(&flags)?);
            commands::backtest(&flags)
        }
        Command::Sweep { run, grid } => {
            init_workers(workers(&run)?);
            commands::sweep(&run, &grid)
        }
        Command::Report(args) => commands::report(&args),
        Command::Selftest { workers } => {
            init_workers(workers);
            commands::selftest()
        }
    }
}

fn workers(flags: &RunFlags) -> Result<Option<usize>, CliError> {
    Ok(flags.workers.or(flags.file_config()?.workers))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cardtrack: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
