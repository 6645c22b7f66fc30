use std::process::ExitCode;

use clap::{Parser, Subcommand};
use difftune::{cmd_evaluate, cmd_generate, cmd_report, cmd_tune, EvaluateArgs, GenerateArgs, ReportArgs, TuneArgs};

#[derive(Parser)]
#[command(name = "difftune", version, about = "Calibrate problem generators to a target accuracy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a configuration whose problems hit the target accuracy.
    Tune(TuneArgs),
    /// Write problems for a configuration as JSON lines.
    Generate(GenerateArgs),
    /// Score problems with the configured target.
    Evaluate(EvaluateArgs),
    /// Fold evaluation outputs into a CSV summary.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tune(a) => cmd_tune(a).map(|run| {
            if let (Some(i), Some(g)) = (run.best_index, run.best_gap) {
                println!("best iteration {i}: gap {g:.4}");
            }
        }),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|r| println!("rho_hat {:.4} over {} problems", r.rho_hat, r.n)),
        Command::Report(a) => cmd_report(a).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
