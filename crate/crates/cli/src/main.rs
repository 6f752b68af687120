use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
mod settings;

use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("no candidate loss survived the validation check")]
    NoCandidate,
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NoCandidate => 3,
            CliError::Run(_) => 1,
        }
    }
}

/// Searches, checks and trains with symbolic recommender losses.
#[derive(Debug, Parser)]
#[command(name = "lossforge", version)]
struct Cli {
    /// Flat key=value file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run loss search, validation check and effectiveness test.
    #[command(allow_negative_numbers = true)]
    Search(Common),
    /// Report the positive rate of every loss in a file.
    Check {
        /// One expression or zoo name per line.
        file: PathBuf,
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long)]
        threshold: Option<String>,
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Train a fresh model with one loss until early stopping.
    #[command(allow_negative_numbers = true)]
    Train(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// mf or mlp.
    #[arg(long)]
    model: Option<String>,
    /// Ratings file, `ml100k`, or `synth[:users,items,rank,noise]`.
    #[arg(long)]
    dataset: Option<String>,
    /// ml100k (tab separated) or csv.
    #[arg(long)]
    format: Option<String>,
    /// classification or regression.
    #[arg(long)]
    task: Option<String>,
    /// Zoo name or expression text.
    #[arg(long)]
    loss: Option<String>,
    /// Fixed smoothing coefficient instead of the grid.
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// Output directory (default: $LOSSFORGE_OUT, then ./runs).
    #[arg(long)]
    out: Option<String>,
    #[arg(long = "max-iters")]
    max_iters: Option<String>,
    #[arg(long)]
    stall: Option<String>,
}

impl Common {
    fn apply(&self, s: &mut Settings) -> Result<(), CliError> {
        let pairs = [
            ("model", &self.model),
            ("dataset", &self.dataset),
            ("format", &self.format),
            ("task", &self.task),
            ("loss", &self.loss),
            ("epsilon", &self.epsilon),
            ("eta", &self.eta),
            ("delta", &self.delta),
            ("rounds", &self.rounds),
            ("seed", &self.seed),
            ("jobs", &self.jobs),
            ("out", &self.out),
            ("max_iters", &self.max_iters),
            ("stall", &self.stall),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                s.set(key, v).map_err(|e| match e {
                    CliError::Usage(m) => CliError::Usage(format!("--{}", m.replacen('_', "-", 1))),
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    match cli.command {
        Command::Search(common) => {
            common.apply(&mut settings)?;
            commands::search(&settings)
        }
        Command::Train(common) => {
            common.apply(&mut settings)?;
            commands::train(&settings)
        }
        Command::Check {
            file,
            pairs,
            threshold,
            epsilon,
            seed,
        } => {
            for (key, value) in [("pairs", pairs), ("threshold", threshold), ("epsilon", epsilon), ("seed", seed)] {
                if let Some(v) = value {
                    settings.set(key, &v).map_err(|e| match e {
                        CliError::Usage(m) => CliError::Usage(format!("--{m}")),
                        other => other,
                    })?;
                }
            }
            commands::check(&settings, &file)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
