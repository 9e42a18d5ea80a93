use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gear_harness::config::Config;

#[derive(Parser)]
#[command(name = "gear", about = "Run and compare gear-training experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-worker CSVs plus a summary.
    Run {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two completed runs step by step.
    Compare {
        /// summary.toml of the first run.
        summary_a: PathBuf,
        /// summary.toml of the second run.
        summary_b: PathBuf,
    },
    /// Re-run one gear config across several TTLs against a baseline.
    TtlSweep {
        /// TOML experiment config (must be gear mode).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated TTL values, e.g. 1,5,20.
        #[arg(long, value_delimiter = ',', required = true)]
        ttls: Vec<u64>,
    },
}

fn load_config(path: &PathBuf) -> Result<Config> {
    let (cfg, warnings) = Config::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let artifacts = gear_harness::run_experiment(&cfg)?;
            print!("{}", artifacts.summary.render());
            println!("wrote {}", artifacts.summary_path.display());
        }
        Command::Compare { summary_a, summary_b } => {
            let report = gear_harness::compare(&summary_a, &summary_b)?;
            print!("{}", report.render());
        }
        Command::TtlSweep { config, ttls } => {
            let cfg = load_config(&config)?;
            let (table, path) = gear_harness::ttl_sweep(&cfg, &ttls)?;
            print!("{}", table.render());
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
