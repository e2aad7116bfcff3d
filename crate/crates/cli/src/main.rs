//! `sda`: generate, train, bias-correct, downscale and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sda", version, about = "Score-based generative downscaling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for parallel sample generation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Synthesize a fine trajectory and its coarse observation.
    Generate,
    /// Fit the window score network on the fine trajectory.
    Train,
    /// Quantile-map a coarse source onto a coarse reference.
    BiasCorrect,
    /// Draw posterior samples given the coarse observation.
    Downscale,
    /// Score downscaled samples against the fine truth.
    Evaluate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::BiasCorrect => "bias-correct",
            Command::Downscale => "downscale",
            Command::Evaluate => "evaluate",
        }
    }
}

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn missing(message: String) -> Self {
        Self { code: 3, message }
    }

    pub fn shape(message: String) -> Self {
        Self { code: 4, message }
    }
}

impl From<sda_core::Error> for Failure {
    fn from(e: sda_core::Error) -> Self {
        use sda_core::Error::*;
        let code = match &e {
            Read { .. } | Format(_) => 3,
            Shape(_) | Data(_) => 4,
            Domain(_) => 2,
            Numerical(_) => 5,
            Write { .. } => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::config("--jobs must be >= 1".into()));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    commands::emit_config(&cfg, cli.command.name())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::BiasCorrect => commands::bias_correct(&cfg),
        Command::Downscale => commands::downscale(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sda {}: {}", cli.command.name(), f.message);
            ExitCode::from(f.code)
        }
    }
}
