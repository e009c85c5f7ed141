use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracehide::ErrorKind;

mod commands;
mod config;

use config::RunConfig;

/// Importance-aware unlearning workbench for trajectory-user linking models
#[derive(Parser, Debug)]
#[command(name = "tracehide", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Tokenize a raw point CSV into a corpus
    Tokenize,
    /// Generate a synthetic corpus
    Synth,
    /// Train the teacher model
    Train,
    /// Compute importance scores over the train split
    Score,
    /// Run one unlearning method against a deletion request
    Unlearn,
    /// Evaluate a model on a forget/retain partition
    Evaluate,
    /// Run the full benchmark matrix
    Benchmark,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Parse => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
    }
}

fn run(cli: &Cli) -> tracehide::Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => toml::from_str("").expect("empty config parses"),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::Tokenize => commands::tokenize(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Score => commands::score(&cfg),
        Command::Unlearn => commands::unlearn(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Benchmark => commands::benchmark(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(e.kind());
            println!(
                "{}",
                serde_json::json!({"command": format!("{:?}", cli.command).to_lowercase(), "error": e.to_string(), "exit_code": code})
            );
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
