//! Command-line front end: parses arguments, loads the configuration, and
//! dispatches to one of the four commands. Every failure is reported on
//! stderr and mapped to a nonzero exit status.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use simatch::commands;
use simatch::config::{RawConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "simatch",
    version,
    about = "Similarity-matching networks: train, evaluate, pre-train, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured layer stack and write a checkpoint.
    Train(RunArgs),
    /// Encode both data splits with a checkpoint and score a logistic readout.
    Eval(RunArgs),
    /// Measure how far pre-trained filters drift during fine-tuning.
    Pretrain(RunArgs),
    /// Benchmark one convolutional layer on synthetic images.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Inline overrides such as `seed=7`; they take precedence over the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run() -> simatch::Result<()> {
    let cli = Cli::parse();
    let (args, command): (&RunArgs, fn(&RunConfig) -> simatch::Result<()>) = match &cli.command {
        Command::Train(args) => (args, commands::cmd_train),
        Command::Eval(args) => (args, commands::cmd_eval),
        Command::Pretrain(args) => (args, commands::cmd_pretrain),
        Command::Bench(args) => (args, commands::cmd_bench),
    };
    let mut raw = RawConfig::from_file(&args.config)?;
    raw.apply_overrides(&args.overrides)?;
    let config = RunConfig::parse(&raw)?;
    commands::init_thread_pool(config.threads);
    command(&config)
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
