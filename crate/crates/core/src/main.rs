use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cipwr::cli::{cmd_analyze, cmd_simulate, cmd_truth, exit_code, report_exit_code, RunOptions};

#[derive(Parser)]
#[command(name = "cipwr", version, about = "Calibrated weighting estimators for multi-arm survival at a fixed horizon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; affects speed only.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            threads: self.threads,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate arm survivals and contrasts from a CSV dataset.
    Analyze(Common),
    /// Run a Monte Carlo study.
    Simulate(Common),
    /// Compute oracle truths for a simulation scenario.
    Truth {
        #[command(flatten)]
        common: Common,
        /// Oracle draws; defaults to the config's truth_n.
        #[arg(long)]
        draws: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Analyze(c) => cmd_analyze(&c.config, &c.options()).map(|r| {
            for f in &r.failures {
                eprintln!("{}: {}", f.method, f.message);
            }
            report_exit_code(&r)
        }),
        Command::Simulate(c) => cmd_simulate(&c.config, &c.options()).map(|_| 0),
        Command::Truth { common, draws } => cmd_truth(&common.config, *draws, &common.options()).map(|_| 0),
    };
    match code {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
