use std::path::PathBuf;

use aeqa::baselines::EmbeddingLookup;
use aeqa::data::Corpus;
use aeqa::experiment::{baseline_rows, row, score_model, systems_markdown, SystemRow};
use aeqa::mcqa::Transcript;
use aeqa::training::{load_checkpoint, Variant};
use serde::{Deserialize, Serialize};

use crate::commands::train::check_compatible;
use crate::config::{require, write_json, write_text, RunConfig};
use crate::failure::{data, CmdResult, Failure};

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained checkpoint directory; also supplies the word vectors of the
    /// similarity baselines.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Baselines to score, comma separated: length, similarity, random.
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,
    /// Transcript to evaluate on: asr (recognized) or clean.
    #[arg(long)]
    pub condition: Option<Transcript>,
    /// Directory for eval.json and eval.md.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_MD: &str = "eval.md";
pub const EVAL_CONFIG: &str = "eval_config.json";
const BASELINES: [&str; 3] = ["length", "similarity", "random"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Transcript,
    pub seed: u64,
    pub systems: Vec<SystemRow>,
}

pub fn run(mut cfg: RunConfig, seed: u64, args: EvalArgs) -> CmdResult {
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if let Some(b) = args.baselines {
        cfg.baselines = b;
    }
    if let Some(c) = args.condition {
        cfg.condition = c;
    }
    for b in &cfg.baselines {
        if !BASELINES.contains(&b.as_str()) {
            return Err(Failure::Usage(format!(
                "unknown baseline {b:?} (expected length, similarity or random)"
            )));
        }
    }
    let wants = |b: &str| cfg.baselines.iter().any(|x| x == b);
    let data_dir = require(cfg.data.clone(), "--data")?;
    let out = require(cfg.out.clone(), "--out")?;
    if wants("similarity") && cfg.checkpoint.is_none() {
        return Err(Failure::Usage("the similarity baseline needs --checkpoint for its word vectors".into()));
    }
    if cfg.checkpoint.is_none() && cfg.baselines.is_empty() {
        return Err(Failure::Usage("nothing to evaluate: give --checkpoint or --baselines".into()));
    }
    let corpus = data(Corpus::load(&data_dir))?;
    let state = match &cfg.checkpoint {
        Some(dir) => {
            let s = data(load_checkpoint(dir))?;
            check_compatible(s.params.config(), &corpus)?;
            Some(s)
        }
        None => None,
    };

    let mut systems = Vec::new();
    if !cfg.baselines.is_empty() {
        let emb = match &state {
            Some(s) if wants("similarity") => {
                Some(EmbeddingLookup::new(s.params.store.value(s.params.layout.emb.token).clone())?)
            }
            _ => None,
        };
        for r in baseline_rows(&corpus, emb.as_ref(), seed, cfg.condition)? {
            let family = r.key.split('_').take(2).collect::<Vec<_>>().join("_");
            let keep = match family.as_str() {
                "choice_length" => wants("length"),
                "choice_similarity" => wants("similarity"),
                _ => wants("random"),
            };
            if keep {
                systems.push(r);
            }
        }
    }
    if let Some(s) = &state {
        let (key, group) = match s.variant {
            Variant::Vanilla => ("vanilla", "Vanilla BERT"),
            Variant::Aebert => ("aebert", "aeBERT"),
        };
        let label = format!("trained on {}", s.transcript);
        systems.push(row(key, group, &label, score_model(s, &corpus, cfg.condition)?));
    }

    let report = EvalReport {
        condition: cfg.condition,
        seed,
        systems,
    };
    write_json(&out.join(EVAL_JSON), &report)?;
    let md = format!(
        "Evaluated on {} transcripts.\n\n{}",
        cfg.condition,
        systems_markdown(&report.systems)
    );
    write_text(&out.join(EVAL_MD), &md)?;
    write_json(&out.join(EVAL_CONFIG), &cfg)?;
    print!("{md}");
    Ok(())
}
