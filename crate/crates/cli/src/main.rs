mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Next-event-prediction pipeline over synthetic patient timelines.
#[derive(Parser)]
#[command(name = "nep", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, env = "NEP_OUT")]
    out: Option<PathBuf>,
    /// Dotted-path override such as `train.total_steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and downstream cohorts and their oracle.
    Synth,
    /// Sample targets and materialise training and held-out instances.
    Prep,
    /// Train the model and write the checkpoint and loss curve.
    Train,
    /// Embed the downstream cohort.
    Embed {
        /// Checkpoint to use instead of the one `train` wrote.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated downstream metrics for each task and feature source.
    Eval {
        /// Embedding file to use instead of the one `embed` wrote.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Label-efficiency sweep over training-set sizes.
    Sweep {
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Summarise a run directory into report.md.
    Report {
        /// Run directory; defaults to the configured output directory.
        dir: Option<PathBuf>,
    },
    /// Run every stage in order.
    All,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!(
            "out_dir={}",
            toml::Value::String(out.display().to_string())
        ));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Prep => commands::prep(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Embed { checkpoint } => commands::embed(&cfg, checkpoint.as_deref()),
        Command::Eval { embeddings } => commands::eval(&cfg, embeddings.as_deref()),
        Command::Sweep { embeddings } => commands::sweep(&cfg, embeddings.as_deref()),
        Command::Report { dir } => {
            let path = commands::report(dir.as_deref().unwrap_or(&cfg.out_dir))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::All => commands::all(&cfg),
        Command::Config => {
            print!(
                "{}",
                toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
