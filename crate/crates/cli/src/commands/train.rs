use std::path::PathBuf;

use aeqa::data::Corpus;
use aeqa::encoder::EncoderConfig;
use aeqa::experiment::write_metrics;
use aeqa::mcqa::Transcript;
use aeqa::training::stages::StageData;
use aeqa::training::{load_checkpoint, run_stage, save_checkpoint, MetricRecord, Stage, TrainState, Variant};

use crate::config::{require, ModelFlags, RunConfig};
use crate::failure::{data, CmdResult, Failure};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stages to run, comma separated, in order.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<Stage>>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Transcript the text channel reads: asr (recognized) or clean.
    #[arg(long)]
    pub condition: Option<Transcript>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint";

pub fn run(mut cfg: RunConfig, seed: u64, args: TrainArgs) -> CmdResult {
    args.model.apply(&mut cfg);
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if args.init.is_some() {
        cfg.init = args.init;
    }
    if args.stages.is_some() {
        cfg.stages = args.stages;
    }
    let data_dir = require(cfg.data.clone(), "--data")?;
    let out = require(cfg.out.clone(), "--out")?;
    let corpus = data(Corpus::load(&data_dir))?;

    let mut state = match &cfg.init {
        Some(dir) => {
            let s = data(load_checkpoint(dir))?;
            check_compatible(s.params.config(), &corpus)?;
            cfg.encoder = s.params.config().clone();
            s
        }
        None => {
            cfg.encoder.acoustic_dim = corpus.manifest.gen.d_a;
            cfg.encoder.vocab_size = corpus.manifest.gen.vocab_size;
            cfg.encoder.validate()?;
            TrainState::new(&cfg.encoder, Variant::Aebert, Transcript::Asr, seed)?
        }
    };
    let resumed = cfg.init.is_some();
    cfg.variant = args.variant.unwrap_or(if resumed { state.variant } else { cfg.variant });
    cfg.condition = args.condition.unwrap_or(if resumed { state.transcript } else { cfg.condition });
    state.variant = cfg.variant;
    state.transcript = cfg.condition;
    cfg.plan.validate()?;

    let stages = plan_stages(&state, cfg.stages.clone())?;
    cfg.stages = Some(stages.clone());
    cfg.write(&out)?;

    let split = StageData {
        train: &corpus.train,
        dev: &corpus.dev,
    };
    for stage in stages {
        let log = run_stage(&mut state, stage, &split, &cfg.plan, seed)?;
        data(write_metrics(&out.join("metrics").join(format!("{stage}.jsonl")), &log))?;
        data(save_checkpoint(&out.join("checkpoints").join(stage.name()), &state))?;
        eprintln!("{}", stage_summary(stage, &log));
    }
    data(save_checkpoint(&out.join(FINAL_CHECKPOINT), &state))?;
    eprintln!("final checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

/// Resolves the stage list and rejects an invalid order before any work.
fn plan_stages(state: &TrainState, requested: Option<Vec<Stage>>) -> CmdResult<Vec<Stage>> {
    let explicit = requested.is_some();
    let mut stages = requested.unwrap_or_else(|| {
        Stage::ALL
            .into_iter()
            .filter(|s| !state.has_completed(*s))
            .collect()
    });
    if state.variant == Variant::Vanilla && stages.contains(&Stage::Tsaatt) {
        if explicit {
            eprintln!("note: the vanilla variant has no tsaatt stage; skipping it");
        }
        stages.retain(|s| *s != Stage::Tsaatt);
    }
    if stages.is_empty() {
        return Err(Failure::Usage("no stages left to run".into()));
    }
    let mut dry = TrainState {
        params: state.params.clone(),
        completed: state.completed.clone(),
        step: state.step,
        variant: state.variant,
        transcript: state.transcript,
    };
    for &s in &stages {
        dry.check_can_run(s)?;
        dry.completed.push(s);
    }
    Ok(stages)
}

pub fn check_compatible(model: &EncoderConfig, corpus: &Corpus) -> CmdResult {
    let gen = &corpus.manifest.gen;
    if model.acoustic_dim != gen.d_a {
        return Err(Failure::Data(format!(
            "checkpoint expects {}-dimensional frames, the data has {}",
            model.acoustic_dim, gen.d_a
        )));
    }
    if model.vocab_size < gen.vocab_size {
        return Err(Failure::Data(format!(
            "checkpoint vocabulary of {} is smaller than the data's {}",
            model.vocab_size, gen.vocab_size
        )));
    }
    Ok(())
}

fn stage_summary(stage: Stage, log: &[MetricRecord]) -> String {
    let last = log.iter().rev().find_map(|r| match r {
        MetricRecord::Epoch {
            epoch,
            train_loss,
            dev_accuracy,
            ..
        } => Some((*epoch, *train_loss, *dev_accuracy)),
        _ => None,
    });
    match last {
        Some((epoch, loss, Some(acc))) => {
            format!("{stage}: {} epochs, final loss {loss:.4}, dev accuracy {acc:.4}", epoch + 1)
        }
        Some((epoch, loss, None)) => format!("{stage}: {} epochs, final loss {loss:.4}", epoch + 1),
        None => format!("{stage}: no epochs"),
    }
}

