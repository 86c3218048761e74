use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feddistill::config::load_config;
use feddistill::runner::{apply_overrides, cmd_partition_report, cmd_run, cmd_sweep};

/// Federated learning simulator with group-distillation local training.
///
/// Log verbosity follows the RUST_LOG environment variable.
#[derive(Parser)]
#[command(name = "feddistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override the config's seed list, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for parallel client training; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment once per seed.
    Run { config: PathBuf },
    /// Run the Cartesian product of a hyperparameter grid and rank results.
    Sweep { config: PathBuf, grid: PathBuf },
    /// Report per-client class histograms and rich/few group assignments.
    PartitionReport { config: PathBuf },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()?;
    }
    let config_path = match &cli.command {
        Command::Run { config }
        | Command::Sweep { config, .. }
        | Command::PartitionReport { config } => config.clone(),
    };
    let mut cfg = load_config(&config_path)?;
    apply_overrides(&mut cfg, cli.output_dir.as_deref(), cli.seeds.as_deref())?;
    match &cli.command {
        Command::Run { .. } => {
            let summary = cmd_run(&cfg)?;
            if let (Some(m), Some(s)) = (summary.mean_final_top1, summary.std_final_top1) {
                println!("{}: final top-1 {:.4} +- {:.4} over {} seed(s)", summary.strategy, m, s, cfg.seeds.len());
            } else {
                println!("{}: no rounds executed", summary.strategy);
            }
        }
        Command::Sweep { grid, .. } => {
            cmd_sweep(&cfg, grid)?;
            println!("sweep complete; ranking at {}/ranking.csv", cfg.output_dir);
        }
        Command::PartitionReport { .. } => {
            cmd_partition_report(&cfg)?;
            println!("partition reports written under {}", cfg.output_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
