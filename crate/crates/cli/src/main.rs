use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use qfeedback::runner::{parse_config, run_scenario, write_results};
use qfeedback::Error;

#[derive(Parser)]
#[command(name = "qfeedback", version, about = "Run a feedback-control scenario from a config file")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace every trajectory or trial count.
        #[arg(long)]
        trajectories: Option<usize>,
        /// Replace the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the ensemble; results do not depend on it.
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    trajectories: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<(), Error> {
    let mut cfg = parse_config(&config)?.with_workers(workers);
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = trajectories {
        cfg = cfg.with_trajectories(n)?;
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir());
    let start = Instant::now();
    let result = run_scenario(&cfg)?;
    let files = write_results(&result, &dir)?;
    println!("{}: wrote {} files to {}", cfg.scenario, files.len(), dir.display());
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let Command::Run { config, out, trajectories, seed, workers } = Cli::parse().command;
    match run(config, out, trajectories, seed, workers) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
