//! Command line front end for the maxnet training engine.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "maxnet",
    about = "Train and evaluate grouped-max networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-phase training protocol described by a TOML config.
    Train {
        /// Path to a TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output root from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress progress output; machine-readable lines are still printed.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a saved checkpoint on an IDX image/label pair.
    Eval {
        /// Checkpoint produced by `maxnet train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file.
        #[arg(long)]
        images: PathBuf,
        /// IDX label file.
        #[arg(long)]
        labels: PathBuf,
        /// Only print the machine-readable summary line.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// Path to a TOML run configuration (its [gradcheck] section is used).
        #[arg(long)]
        config: PathBuf,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Only print the machine-readable summary line.
        #[arg(long)]
        quiet: bool,
    },
    /// Write the deterministic IDX test fixtures into a directory.
    MakeFixtures {
        /// Directory to create the fixture files in.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &maxnet::Error) -> ExitCode {
    use maxnet::Error;
    match err {
        Error::Config(_) => ExitCode::from(2),
        Error::Data(_) | Error::Format { .. } | Error::Length { .. } | Error::Io { .. } => {
            ExitCode::from(3)
        }
        Error::NonFinite { .. } => ExitCode::from(4),
        Error::State(_) | Error::Dimension { .. } => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            quiet,
        } => commands::train(&config, seed, out, quiet),
        Command::Eval {
            checkpoint,
            images,
            labels,
            quiet,
        } => commands::eval(&checkpoint, &images, &labels, quiet),
        Command::Gradcheck { config, seed, quiet } => commands::gradcheck(&config, seed, quiet),
        Command::MakeFixtures { out } => commands::make_fixtures(&out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
