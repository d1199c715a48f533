//! `pevgrid`: joint PEV charging scheduling and optimal power flow.

mod commands;
mod plot;
mod trace;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "pevgrid",
    version,
    about = "Joint PEV charging scheduling and AC optimal power flow via semidefinite relaxation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Receding-horizon (online) simulation writing per-slot traces.
    SimulateOnline(commands::SimulateArgs),
    /// Full-horizon (offline) optimization: relaxation bound + repair.
    SimulateOffline {
        #[command(flatten)]
        args: commands::SimulateArgs,
        /// Rank-repair method: joint (all slots at once) or dnoa
        /// (per-slot with the schedule frozen).
        #[arg(long, value_enum, default_value_t = commands::MethodArg::Joint)]
        method: commands::MethodArg,
    },
    /// Run online and offline on one scenario and report the cost ratio.
    Compare(commands::CompareArgs),
    /// Solve a single-slot OPF instance from a case file.
    SolveOpf(commands::SolveOpfArgs),
    /// Write a ready-to-run scenario directory.
    GenScenario(commands::GenScenarioArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => commands::EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match &cli.command {
        Command::SimulateOnline(args) => commands::cmd_simulate_online(args),
        Command::SimulateOffline { args, method } => commands::cmd_simulate_offline(args, *method),
        Command::Compare(args) => commands::cmd_compare(args),
        Command::SolveOpf(args) => commands::cmd_solve_opf(args),
        Command::GenScenario(args) => commands::cmd_gen_scenario(args),
    };
    ExitCode::from(code)
}
