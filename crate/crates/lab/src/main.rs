use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsa_lab::manifest::StageStatus;
use dsa_lab::{load_config, run_experiment, ExperimentConfig, LabError, RunManifest, RunOptions};

/// Stochastic-approximation experiments under decision-dependent Markov noise.
#[derive(Debug, Parser)]
#[command(name = "dsa-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the analyses of a config (TOML) or re-run a previous `manifest.json`.
    Run {
        config: PathBuf,
        /// Write outputs here instead of the config's `output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads (scheduling only; results do not depend on it).
        #[arg(long)]
        threads: Option<usize>,
        /// Replace the config's master seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a config without running anything.
    Validate { config: PathBuf },
}

const EXIT_ANALYSIS_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn read_config(path: &Path) -> Result<ExperimentConfig, LabError> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(RunManifest::load(path)?.config)
    } else {
        Ok(load_config(path)?)
    }
}

fn exit_for(err: &LabError) -> ExitCode {
    match err {
        LabError::Config(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_ANALYSIS_FAILED),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run { config, output_dir, threads, seed_override } => {
            let cfg = match read_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return exit_for(&e);
                }
            };
            let opts = RunOptions { threads, output_dir, seed_override };
            match run_experiment(&cfg, &opts) {
                Ok(outcome) => {
                    for stage in &outcome.manifest.stages {
                        match (&stage.status, &stage.error) {
                            (StageStatus::Ok, _) => println!("{:<14} ok      {:>9.2}s", stage.name, stage.seconds),
                            (StageStatus::Failed, err) => {
                                println!("{:<14} FAILED  {}", stage.name, err.as_deref().unwrap_or(""))
                            }
                        }
                    }
                    for w in &outcome.manifest.warnings {
                        eprintln!("warning: {w}");
                    }
                    println!("outputs in {}", outcome.output_dir.display());
                    if outcome.failed() {
                        ExitCode::from(EXIT_ANALYSIS_FAILED)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_for(&e)
                }
            }
        }
    }
}
