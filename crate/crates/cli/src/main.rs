//! Command-line front end: validate configs, run experiments, extract
//! figure data from reports.

use clap::{Parser, Subcommand};
use sigmafair::experiment::{self, ExperimentConfig, ExperimentReport};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sigmafair",
    version,
    about = "Heteroscedastic uncertainty and fairness experiments on tabular data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config and write report files.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
    /// Parse and validate a config without running anything.
    Validate {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
    /// Extract tidy CSV data for one figure from a report.
    Plotdata {
        /// Path to a report.json produced by `run`.
        report: PathBuf,
        /// Figure name: calibration-bins, abstention, or consistency-box.
        #[arg(long)]
        figure: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> sigmafair::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = experiment::run_to_dir(&config)?;
            println!("report written to {}", dir.display());
            Ok(())
        }
        Command::Validate { config } => {
            let config = ExperimentConfig::load(&config)?;
            config.validate()?;
            println!("config is valid: {:?} experiment, {} estimator(s), {} seed(s)",
                config.experiment,
                config.estimators.len(),
                config.seeds.len(),
            );
            Ok(())
        }
        Command::Plotdata { report, figure, out } => {
            let report = ExperimentReport::load(&report)?;
            let csv = experiment::plotdata(&report, &figure)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}
