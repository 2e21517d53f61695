use std::path::PathBuf;
use std::process::ExitCode;

use afr_cli::{commands, CliError, Run, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "afr",
    version,
    about = "Automatic feature reweighting experiments"
)]
struct Cli {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the synthetic dataset.
    Generate,
    /// Train the stage-1 ERM network and cache embeddings.
    TrainBase,
    /// Retrain the last layer under the configured weight scheme.
    Reweight,
    /// Grid search over γ, λ and learning rate.
    Sweep,
    /// Test WGA against the fraction of group-labelled validation data.
    LabelEfficiency,
    /// Fit the weight network that targets equal group weight.
    BalanceLearner,
    /// Write plot-data tables for an existing run directory.
    Plots,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let run = Run::new(config, cli.out, cli.jobs)?;
    match cli.command {
        Command::Generate => commands::generate(&run),
        Command::TrainBase => commands::train_base(&run),
        Command::Reweight => commands::reweight(&run),
        Command::Sweep => commands::sweep(&run),
        Command::LabelEfficiency => commands::label_efficiency(&run),
        Command::BalanceLearner => commands::balance_learner(&run),
        Command::Plots => commands::plots(&run),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("afr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
