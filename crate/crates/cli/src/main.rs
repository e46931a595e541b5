use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use koopman_ptc_cli::commands::{self, exit_code};
use koopman_ptc_cli::config::ExperimentConfig;

/// Data-driven prescribed-time control pipeline.
#[derive(Parser)]
#[command(name = "kptc", version, about)]
struct Cli {
    /// Experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for datasets, the model, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-initial-condition simulation runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant and record train/validation datasets.
    Collect,
    /// Fit the lifted model, its uncertainty bound, and the companion form.
    Identify,
    /// Run the closed loop for every configured initial condition.
    Simulate,
    /// Print the aggregate report and consolidate the trajectories.
    Report,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let outcome = (|| -> anyhow::Result<i32> {
        match cli.command {
            Command::Collect => {
                let cfg = load_config(&cli)?;
                commands::cmd_collect(&cfg, &cli.out)?;
                Ok(exit_code::SUCCESS)
            }
            Command::Identify => {
                let cfg = load_config(&cli)?;
                commands::cmd_identify(&cfg, &cli.out)?;
                Ok(exit_code::SUCCESS)
            }
            Command::Simulate => {
                let cfg = load_config(&cli)?;
                let outcome = commands::cmd_simulate(&cfg, &cli.out, threads)?;
                Ok(outcome.exit_code())
            }
            Command::Report => {
                commands::cmd_report(&cli.out)?;
                Ok(exit_code::SUCCESS)
            }
        }
    })();

    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::classify(&err) as u8)
        }
    }
}
