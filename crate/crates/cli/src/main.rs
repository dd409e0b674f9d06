use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xsrank_cli::{
    cmd_backtest, cmd_evaluate, cmd_features, cmd_generate, cmd_train, error_line, RunOptions,
};

#[derive(Parser)]
#[command(name = "xsrank", version, about = "Cross-sectional stock ranking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market dataset.
    Generate(Common),
    /// Train a ranker and save the selected checkpoint.
    Train(Common),
    /// Score a date window with a checkpoint and report RankIC.
    Evaluate(Common),
    /// Backtest a sorted long(-short) portfolio.
    Backtest(Common),
    /// Compute intraday factors.
    Features(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Leave the generation time out of the config snapshot.
    #[arg(long)]
    no_timestamp: bool,
}

impl From<Common> for RunOptions {
    fn from(c: Common) -> Self {
        RunOptions {
            config: c.config,
            seed: c.seed,
            out: c.out,
            overrides: c.overrides,
            no_timestamp: c.no_timestamp,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", serde_json::json!({ "error": first, "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate(c) => cmd_generate(&c.into()),
        Command::Train(c) => cmd_train(&c.into()),
        Command::Evaluate(c) => cmd_evaluate(&c.into()),
        Command::Backtest(c) => cmd_backtest(&c.into()),
        Command::Features(c) => cmd_features(&c.into()),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
