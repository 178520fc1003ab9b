use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cto_core::pipeline::{run, Command, Overrides};

/// Weak-supervision labeling of clinical trial outcomes.
///
/// Settings are taken from the command line first, then the environment
/// (CTO_CONFIG, CTO_SEED), then the config file.
#[derive(Debug, Parser)]
#[command(name = "cto", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON run configuration.
    #[arg(long, global = true, env = "CTO_CONFIG")]
    config: Option<PathBuf>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for every random choice (overrides `seed`).
    #[arg(long, global = true, env = "CTO_SEED")]
    seed: Option<u64>,

    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Phase group to evaluate.
    #[arg(long, global = true, value_parser = ["1", "2", "3", "all"])]
    phase: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Parse and filter the trial file.
    Ingest,
    /// Link trials across phases and match drug approvals.
    Link,
    /// Tune per-phase LF thresholds against gold labels.
    Tune,
    /// Apply LFs and aggregate them into labels.
    Label,
    /// Score labels against gold.
    Evaluate,
    /// Run every stage.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(config) = cli.config else {
        eprintln!("error: no config given (use --config or CTO_CONFIG)");
        return ExitCode::from(1);
    };
    let command = match cli.command {
        Cmd::Ingest => Command::Ingest,
        Cmd::Link => Command::Link,
        Cmd::Tune => Command::Tune,
        Cmd::Label => Command::Label,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Report => Command::Report,
    };
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        phase: cli.phase,
    };
    match run(command, &config, &overrides) {
        Ok(manifest) => {
            for s in &manifest.stages {
                let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{:<9} {}", s.name, counts.join(" "));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
