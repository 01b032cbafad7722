use std::path::PathBuf;
use std::process::ExitCode;

use cclqr::{run, Experiment, RunConfig};
use clap::Parser;

/// Cost-constrained LQR solver and verification harness.
#[derive(Debug, Parser)]
#[command(name = "cclqr", version)]
struct Cli {
    experiment: Experiment,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the randomized probes; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("cclqr: {e}");
            return ExitCode::from(2);
        }
    };
    cfg.experiment = cli.experiment;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    match run(&cfg, &cfg.output_dir) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if outcome.success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("cclqr: {e}");
            ExitCode::from(2)
        }
    }
}
