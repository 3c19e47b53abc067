//! `blockdep` command-line driver.
//!
//! Every command reads a JSON config and writes `result.json`, `samples.csv`
//! and `trace.csv` into the output directory. Exit status: 0 on success,
//! 2 on invalid input, 3 when a solver or the fixed point fails to converge.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blockdep", version, about = "Universality experiments for block-dependent designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Io {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate or merge partitions.
    #[command(subcommand)]
    Partition(PartitionCmd),
    /// Rate shapes.
    #[command(subcommand)]
    Rates(RatesCmd),
    /// Sample or check random designs.
    #[command(subcommand)]
    Design(DesignCmd),
    /// Solve one ERM instance.
    Solve(Io),
    /// State-evolution fixed point.
    #[command(subcommand)]
    Statepoint(StatepointCmd),
    /// Design-vs-Gaussian comparison over replications.
    #[command(subcommand)]
    Universality(RunCmd),
    /// Simulated error against the fixed-point prediction.
    #[command(subcommand)]
    Convergence(RunCmd),
    /// Swap-path checks.
    #[command(subcommand)]
    Lindeberg(LindebergCmd),
}

#[derive(Subcommand)]
enum PartitionCmd {
    Check(Io),
    Merge(Io),
}

#[derive(Subcommand)]
enum RatesCmd {
    Sigma(Io),
    AdmissibleD(Io),
}

#[derive(Subcommand)]
enum DesignCmd {
    Sample(Io),
    Check(Io),
}

#[derive(Subcommand)]
enum StatepointCmd {
    Solve(Io),
}

#[derive(Subcommand)]
enum RunCmd {
    Run(Io),
}

#[derive(Subcommand)]
enum LindebergCmd {
    Telescope(Io),
    Gap(Io),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || match cli.command {
        Command::Partition(PartitionCmd::Check(io)) => commands::partition_check(&io),
        Command::Partition(PartitionCmd::Merge(io)) => commands::partition_merge(&io),
        Command::Rates(RatesCmd::Sigma(io)) => commands::rates_sigma(&io),
        Command::Rates(RatesCmd::AdmissibleD(io)) => commands::rates_admissible_d(&io),
        Command::Design(DesignCmd::Sample(io)) => commands::design_sample(&io),
        Command::Design(DesignCmd::Check(io)) => commands::design_check(&io),
        Command::Solve(io) => commands::solve(&io),
        Command::Statepoint(StatepointCmd::Solve(io)) => commands::statepoint_solve(&io),
        Command::Universality(RunCmd::Run(io)) => commands::universality_run(&io),
        Command::Convergence(RunCmd::Run(io)) => commands::convergence_run(&io),
        Command::Lindeberg(LindebergCmd::Telescope(io)) => commands::lindeberg_telescope(&io),
        Command::Lindeberg(LindebergCmd::Gap(io)) => commands::lindeberg_gap(&io),
    };
    let result = blockdep::harness::with_thread_cap(run).and_then(|r| r);
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Invalid(msg)) => {
            eprintln!("blockdep: {msg}");
            ExitCode::from(2)
        }
        Ok(commands::Status::NotConverged(msg)) => {
            eprintln!("blockdep: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("blockdep: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &blockdep::Error) -> u8 {
    match e {
        blockdep::Error::NotConverged(_) => 3,
        blockdep::Error::Io(_) => 1,
        _ => 2,
    }
}
