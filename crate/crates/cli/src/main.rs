//! `coarsefine` command-line driver.
//!
//! Each subcommand reads its inputs from the work directory and writes one
//! artifact back, so a full run is
//! `gen-data → label-exits → train-predictor → heal → embed → query → eval`.
//! Exit codes: 0 success, 1 bad configuration or missing input, 2 runtime
//! failure, 3 selftest failure.

mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "coarsefine", version, about = "Early-exit multimodal embedding pipeline")]
struct Cli {
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// key=value config file. Defaults to `<workdir>/config.txt` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and the base encoder checkpoint.
    GenData,
    /// Label every item with its earliest valid exit.
    LabelExits,
    /// Train the pre-exit predictor on superficial embeddings.
    TrainPredictor,
    /// Heal shallow exits with the shared LoRA suite.
    Heal,
    /// Embed the corpus into the store, batched by predicted exit.
    Embed {
        #[arg(long)]
        max_batch: Option<usize>,
        /// Must match the depth the predictor was trained with.
        #[arg(long)]
        superficial_n: Option<usize>,
        #[arg(long, value_parser = ["on", "off"])]
        pipeline: Option<String>,
        #[arg(long)]
        inject_load_ms: Option<f64>,
        #[arg(long)]
        inject_compute_ms: Option<f64>,
    },
    /// Run cross-modal queries against the store.
    Query {
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        /// Comma-separated item ids to query; defaults to `query_count` items.
        #[arg(long, value_delimiter = ',')]
        items: Vec<u64>,
        /// Include wall-clock stage timings in the report.
        #[arg(long)]
        timings: bool,
        /// Persist the fine embeddings computed during correction.
        #[arg(long)]
        write_back: bool,
    },
    /// Recall table for coarse and corrected rankings.
    Eval {
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
    },
    /// Replay an arrival trace under full-depth, fixed-exit and pre-exit policies.
    Simulate {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Run the invariant suites.
    Selftest,
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((key, v.to_string()));
            }
        }
        let mut out = Vec::new();
        match self {
            Command::Embed { max_batch, superficial_n, pipeline, inject_load_ms, inject_compute_ms } => {
                push(&mut out, "max_batch", max_batch);
                push(&mut out, "superficial_n", superficial_n);
                push(&mut out, "pipeline", pipeline);
                push(&mut out, "inject_load_ms", inject_load_ms);
                push(&mut out, "inject_compute_ms", inject_compute_ms);
            }
            Command::Query { k1, k2, .. } | Command::Eval { k1, k2 } => {
                push(&mut out, "k1", k1);
                push(&mut out, "k2", k2);
            }
            Command::Simulate { trace, profile, horizon } => {
                push(&mut out, "trace", &trace.as_ref().map(|p| p.display()));
                push(&mut out, "profile", &profile.as_ref().map(|p| p.display()));
                push(&mut out, "horizon_s", horizon);
            }
            _ => {}
        }
        out
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Command::Selftest = cli.command {
        return selftest::run();
    }
    let cfg = commands::resolve_config(&cli.workdir, cli.config.as_deref(), &cli.set, &cli.command.overrides())?;
    let ws = commands::Workspace::new(cli.workdir.clone(), cfg);
    match &cli.command {
        Command::GenData => ws.gen_data(),
        Command::LabelExits => ws.label_exits(),
        Command::TrainPredictor => ws.train_predictor(),
        Command::Heal => ws.heal(),
        Command::Embed { .. } => ws.embed(),
        Command::Query { items, timings, write_back, .. } => ws.query(items, *timings, *write_back),
        Command::Eval { .. } => ws.eval(),
        Command::Simulate { .. } => ws.simulate(),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures; --help and --version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
