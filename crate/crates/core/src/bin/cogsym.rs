use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cogsym::experiment::{self, ExperimentConfig, Method, Workspace};
use cogsym::lingua::Task;
use cogsym::rank::RankMethod;
use cogsym::report;
use cogsym::sweep::Strategy;

/// Layer-selective adaptation sweeps on a micro transformer.
#[derive(Parser)]
#[command(name = "cogsym", version)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed for pretraining and adaptation.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Training method for sweeps: full or lora.
    #[arg(long, default_value = "full")]
    method: Method,
    /// Adapter rank (overrides the config).
    #[arg(long = "lora-r", global = true)]
    lora_r: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model on the known languages and check the gate.
    Pretrain,
    /// Train and evaluate every plan of a strategy plus both reference runs.
    Sweep {
        #[arg(long)]
        strategy: Strategy,
    },
    /// Score layers on the base model.
    Rank {
        #[arg(long)]
        method: RankMethod,
    },
    /// Evaluate one checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        /// `source->target`, e.g. `u0->k0`.
        #[arg(long)]
        direction: String,
    },
    /// Write CSV tables and SVG charts.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config.
    Config,
}

fn run(cli: Cli) -> cogsym::Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.method.kind = cli.method;
    if let Some(r) = cli.lora_r {
        config.method.lora.rank = r;
    }
    if let Command::Config = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let ws = Workspace::open(config)?;
    match cli.command {
        Command::Pretrain => {
            let r = experiment::cmd_pretrain(&ws, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Sweep { strategy } => {
            let o = experiment::cmd_sweep(&ws, cli.seed, strategy, cli.method, cli.workers)?;
            for id in &o.executed {
                println!("done    {id}");
            }
            for id in &o.skipped {
                println!("skipped {id}");
            }
            for (id, msg) in &o.failed {
                eprintln!("failed  {id}: {msg}");
            }
            if !o.failed.is_empty() {
                return Err(cogsym::Error::State(format!("{} run(s) failed; the sweep is partial", o.failed.len())));
            }
        }
        Command::Rank { method } => {
            let s = experiment::cmd_rank(&ws, cli.seed, method)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval {
            checkpoint,
            task,
            direction,
        } => {
            let (src, tgt) = direction
                .split_once("->")
                .ok_or_else(|| cogsym::Error::Input(format!("direction `{direction}` is not of the form source->target")))?;
            for r in experiment::cmd_eval(&ws, &checkpoint, task, src, tgt)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Report { out } => {
            let files = report::cmd_report(&ws, &out)?;
            for p in files.tables.iter().chain(&files.figures) {
                println!("{}", p.display());
            }
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
