//! `aeqa`: generate synthetic spoken-QA corpora, train the staged models,
//! evaluate, consolidate reports and check gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 verification failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{eval, experiment, gen_data, gradcheck, report, train};
use crate::config::RunConfig;
use crate::failure::CmdResult;

#[derive(Debug, Parser)]
#[command(name = "aeqa", version, about = "Audio-enriched encoder for spoken multiple-choice QA")]
struct Cli {
    /// Run config JSON; flags override the fields they mirror. For
    /// gradcheck, an encoder config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed. Falls back to the config file, then AEQA_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/dev/test JSONL and a manifest, then audit them.
    GenData(gen_data::GenDataArgs),
    /// Run training stages and write per-stage checkpoints and metrics.
    Train(train::TrainArgs),
    /// Score a checkpoint and baselines; writes eval.json and eval.md.
    Eval(eval::EvalArgs),
    /// Train and score every system of both comparison tables.
    Experiment(experiment::ExperimentArgs),
    /// Consolidate experiment directories into one table and a CSV.
    Report(report::ReportArgs),
    /// Finite-difference gradient check of every op and model path
    /// (exit 3 naming the failing ops).
    Gradcheck(gradcheck::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    if let Command::Gradcheck(args) = cli.command {
        return gradcheck::run(cli.config, args);
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::GenData(a) => gen_data::run(cfg, seed, a),
        Command::Train(a) => train::run(cfg, seed, a),
        Command::Eval(a) => eval::run(cfg, seed, a),
        Command::Experiment(a) => experiment::run(cfg, seed, a),
        Command::Report(a) => report::run(cfg, a),
        Command::Gradcheck(_) => unreachable!("handled above"),
    }
}
