//! `ctxfuse`: dataset generation, training, evaluation, cost accounting,
//! embedding export and ablations from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ctxfuse::data::Split;

use crate::commands::Run;
use crate::error::{CliError, CliResult};

/// Log verbosity is read from `CTXFUSE_LOG` (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "ctxfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file of dotted config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset file; a synthetic one is generated from `data.*` and the seed if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Trained {
    #[command(flatten)]
    data: DataArg,

    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: ctxfuse::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Generate,
    /// Train a model; writes a checkpoint, history and validation metrics.
    Train(DataArg),
    /// Evaluate a checkpoint on one split.
    Eval(Trained),
    /// Analytic and instrumented parameter and FLOP counts.
    Cost,
    /// Write fused embeddings for one split.
    Export(Trained),
    /// Train the ablation grid and write an ordered table.
    Ablate,
}

fn execute(cli: Cli) -> CliResult<String> {
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::from(ctxfuse::Error::io(&cli.out, e)))?;
    let mut run = Run {
        command: "",
        cfg,
        seed: cli.seed,
        out: cli.out,
        data: None,
        checkpoint: None,
        split: None,
    };
    let trained = |run: &mut Run, t: Trained| {
        run.data = t.data.data;
        run.checkpoint = Some(t.checkpoint);
        run.split = Some(t.split);
    };
    match cli.command {
        Command::Generate => commands::generate_cmd(Run { command: "generate", ..run }),
        Command::Train(d) => commands::train_cmd(Run { command: "train", data: d.data, ..run }),
        Command::Eval(t) => {
            trained(&mut run, t);
            commands::eval_cmd(Run { command: "eval", ..run })
        }
        Command::Cost => commands::cost_cmd(Run { command: "cost", ..run }),
        Command::Export(t) => {
            trained(&mut run, t);
            commands::export_cmd(Run { command: "export", ..run })
        }
        Command::Ablate => commands::ablate_cmd(Run { command: "ablate", ..run }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTXFUSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.code());
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.code())
        }
    }
}
