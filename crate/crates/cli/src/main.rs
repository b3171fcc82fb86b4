use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sentifuse_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(name = "sentifuse", version, about = "Visual-textual sentiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration file (TOML).
    #[arg(long, short, global = true, default_value = "sentifuse.toml")]
    config: PathBuf,
    /// Output root; every artifact is written below it.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Encode features afresh instead of using the feature cache.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Aggregate labels, normalize text and write the cleaned manifest.
    Preprocess,
    /// Per-class counts and expert presence ratios of cached features.
    Stats,
    /// Encode every sample on every branch and populate the cache.
    Extract,
    /// Train the configured stage on the fixed split.
    Train,
    /// Score a checkpoint on the validation or test part of the split.
    Eval,
    /// Retrain with each branch removed in turn.
    Ablate,
    /// k-fold cross-validation.
    Cv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Preprocess => Command::Preprocess,
        Cmd::Stats => Command::Stats,
        Cmd::Extract => Command::Extract,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Cv => Command::Cv,
    };
    let inv = Invocation {
        config: cli.config,
        out: cli.out,
        no_cache: cli.no_cache,
    };
    match run(command, &inv) {
        Ok(outcome) => {
            println!("{}", outcome.summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
