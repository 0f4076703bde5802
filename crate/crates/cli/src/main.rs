use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use efqat_cli::commands;
use efqat_cli::config::Overrides;

/// Quantization-aware training with structured weight freezing.
#[derive(Parser)]
#[command(name = "efqat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate post-training quantization parameters and write ptq.ckpt.
    Calibrate(RunArgs),
    /// Run the configured mode; writes final.ckpt, metrics.jsonl and summary.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Backward MAC counts and speedups over the ratio grid.
    Cost(TrainArgs),
    /// Accuracy-vs-ratio and speedup-vs-ratio tables from run directories.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Start from this checkpoint instead of training a full-precision model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the freeze plan (plan.json/plan.txt, or plans.jsonl for cost).
    #[arg(long)]
    dump_plan: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories or summary.json files.
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&a.overrides, a.checkpoint.as_deref()),
        Command::Train(a) => commands::train(&a.run.overrides, a.run.checkpoint.as_deref(), a.dump_plan),
        Command::Eval(a) => commands::eval(&a.overrides, &a.checkpoint),
        Command::Cost(a) => commands::cost(&a.run.overrides, a.run.checkpoint.as_deref(), a.dump_plan),
        Command::PlotData(a) => commands::plot_data(&a.runs, &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let efqat_cli::CliError::Core(efqat_core::Error::Divergence { .. }) = e {
                eprintln!("hint: lower --lr or --qparam-lr");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
