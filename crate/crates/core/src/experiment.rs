//! End-to-end comparison on one corpus: the choice baselines, the
//! text-only model, the audio-enriched model with and without acoustic
//! pretraining, and the clean-versus-recognized transcript matrix.
//!
//! Stages shared between systems run once. Warm-up never reads the
//! acoustic weights, so one warm-up serves every branch and the results
//! are identical to running each branch separately.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    choice_length, choice_similarity, evaluate, random_predictions, EmbeddingLookup, LengthMode, SimilarityMode,
};
use crate::data::{write_json, Corpus};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mcqa::{Exemplar, Transcript};
use crate::rng::Stream;
use crate::training::stages::{epoch_losses, first_steps_mean, StageData};
use crate::training::{accuracy_of, run_stage, save_checkpoint, MetricRecord, Stage, TrainPlan, TrainState, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub plan: TrainPlan,
    pub seed: u64,
    /// Also train the text-only model on clean transcripts (the upper
    /// bound row of the transcript matrix).
    #[serde(default = "yes")]
    pub clean_reference: bool,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(encoder: EncoderConfig, plan: TrainPlan, seed: u64) -> Self {
        ExperimentConfig {
            encoder,
            plan,
            seed,
            clean_reference: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub dev: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    /// Stable identifier (`choice_length_longest`, `vanilla`, ...).
    pub key: String,
    pub group: String,
    pub label: String,
    pub score: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub train: Transcript,
    pub eval: Transcript,
    pub score: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub first_100_mse: f64,
    pub epoch_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rho: f64,
    pub seed: u64,
    pub systems: Vec<SystemRow>,
    pub transcripts: Vec<TranscriptRow>,
    pub tsaatt_pretrain: Option<PretrainSummary>,
    /// Wall-clock seconds per phase. Kept out of the serialized report so
    /// reruns produce identical files.
    #[serde(skip, default)]
    pub seconds: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn system(&self, key: &str) -> Option<&Score> {
        self.systems.iter().find(|r| r.key == key).map(|r| &r.score)
    }

    pub fn transcript(&self, train: Transcript, eval: Transcript) -> Option<&Score> {
        self.transcripts
            .iter()
            .find(|r| r.train == train && r.eval == eval)
            .map(|r| &r.score)
    }

    pub fn total_seconds(&self) -> f64 {
        self.seconds.iter().map(|(_, s)| s).sum()
    }

    /// Systems table in the published row layout.
    pub fn table1_markdown(&self) -> String {
        systems_markdown(&self.systems)
    }

    /// Text-only model under clean and recognized transcripts.
    pub fn table2_markdown(&self) -> String {
        let mut s = String::from("| Training | Dev & Test | Dev | Test |\n|---|---|---:|---:|\n");
        for r in &self.transcripts {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                transcript_label(r.train),
                transcript_label(r.eval),
                pct(r.score.dev),
                pct(r.score.test)
            );
        }
        s
    }
}

/// Dev/test accuracy per system, grouped as in the published table.
pub fn systems_markdown(rows: &[SystemRow]) -> String {
    let mut s = String::from("| Model | | Dev | Test |\n|---|---|---:|---:|\n");
    let mut last_group = "";
    for r in rows {
        let group = if r.group != last_group { r.group.as_str() } else { "" };
        last_group = &r.group;
        let _ = writeln!(s, "| {group} | {} | {} | {} |", r.label, pct(r.score.dev), pct(r.score.test));
    }
    s
}

pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn transcript_label(t: Transcript) -> &'static str {
    match t {
        Transcript::Clean => "Manual",
        Transcript::Asr => "ASR",
    }
}

struct Recorder<'a> {
    out: Option<&'a Path>,
    seconds: Vec<(String, f64)>,
    started: Instant,
}

impl Recorder<'_> {
    fn lap(&mut self, what: &str) {
        let now = Instant::now();
        self.seconds.push((what.to_string(), (now - self.started).as_secs_f64()));
        self.started = now;
    }

    fn metrics(&self, name: &str, log: &[MetricRecord]) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let path = dir.join("metrics").join(format!("{name}.jsonl"));
        write_metrics(&path, log)
    }

    fn checkpoint(&self, name: &str, state: &TrainState) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        save_checkpoint(&dir.join("checkpoints").join(name), state)
    }
}

pub fn write_metrics(path: &Path, log: &[MetricRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    for r in log {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Dev and test accuracy of a trained model under one transcript condition.
pub fn score_model(state: &TrainState, corpus: &Corpus, transcript: Transcript) -> Result<Score> {
    let opts = state.eval_options(transcript);
    Ok(Score {
        dev: accuracy_of(&state.params, &corpus.dev, opts)?,
        test: accuracy_of(&state.params, &corpus.test, opts)?,
    })
}

fn score_baseline(corpus: &Corpus, mut f: impl FnMut(&[Exemplar], &str) -> Result<f64>) -> Result<Score> {
    Ok(Score {
        dev: f(&corpus.dev, "dev")?,
        test: f(&corpus.test, "test")?,
    })
}

pub fn row(key: &str, group: &str, label: &str, score: Score) -> SystemRow {
    SystemRow {
        key: key.into(),
        group: group.into(),
        label: label.into(),
        score,
    }
}

/// Baseline rows under one transcript condition. `emb` supplies the word
/// vectors for the similarity baselines, which are skipped without it.
pub fn baseline_rows(
    corpus: &Corpus,
    emb: Option<&EmbeddingLookup>,
    seed: u64,
    transcript: Transcript,
) -> Result<Vec<SystemRow>> {
    let t = transcript;
    let length = |mode| {
        score_baseline(corpus, |exs, _| Ok(evaluate(exs, |p| Ok(choice_length(p, mode, t)))?.accuracy))
    };
    let similarity = |mode, emb| {
        score_baseline(corpus, |exs, _| Ok(evaluate(exs, |p| choice_similarity(p, mode, emb, t))?.accuracy))
    };
    let random = score_baseline(corpus, |exs, split| {
        let preds = random_predictions(exs.len(), Stream::new(seed).derive("random").derive(split));
        let mut it = preds.into_iter();
        Ok(evaluate(exs, |_| Ok(it.next().expect("one prediction per exemplar")))?.accuracy)
    })?;
    let mut rows = vec![
        row("choice_length_longest", "Choice Length", "Longest", length(LengthMode::Longest)?),
        row("choice_length_shortest", "Choice Length", "Shortest", length(LengthMode::Shortest)?),
    ];
    if let Some(emb) = emb {
        rows.push(row(
            "choice_similarity_passage",
            "Choice Similarity",
            "Passage-Choice",
            similarity(SimilarityMode::Passage, emb)?,
        ));
        rows.push(row(
            "choice_similarity_question",
            "Choice Similarity",
            "Question-Choice",
            similarity(SimilarityMode::Question, emb)?,
        ));
    }
    rows.push(row("random", "Random", "Uniform", random));
    Ok(rows)
}

/// Runs every system. With `out`, metrics logs and final checkpoints are
/// written below it.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    if corpus.manifest.gen.d_a != cfg.encoder.acoustic_dim {
        return Err(Error::InvalidInput(format!(
            "corpus frames have {} dimensions, the model expects {}",
            corpus.manifest.gen.d_a, cfg.encoder.acoustic_dim
        )));
    }
    if corpus.manifest.gen.vocab_size > cfg.encoder.vocab_size {
        return Err(Error::InvalidInput(format!(
            "corpus vocabulary of {} exceeds the model's {}",
            corpus.manifest.gen.vocab_size, cfg.encoder.vocab_size
        )));
    }
    let mut rec = Recorder {
        out,
        seconds: Vec::new(),
        started: Instant::now(),
    };
    let seed = cfg.seed;
    let plan = &cfg.plan;
    let data = StageData {
        train: &corpus.train,
        dev: &corpus.dev,
    };

    // Masked-LM pretraining is shared by every system; warm-up on recognized
    // transcripts is shared by the three ASR-trained systems.
    let mut base = TrainState::new(&cfg.encoder, Variant::Aebert, Transcript::Asr, seed)?;
    let log = run_stage(&mut base, Stage::Mlm, &data, plan, seed)?;
    rec.metrics("mlm", &log)?;
    rec.lap("mlm");

    let emb = EmbeddingLookup::new(base.params.store.value(base.params.layout.emb.token).clone())?;
    let mut systems = baseline_rows(corpus, Some(&emb), seed, Transcript::Asr)?;
    rec.lap("baselines");

    let mut pretrained = base.clone();
    let pre_log = run_stage(&mut pretrained, Stage::Tsaatt, &data, plan, seed)?;
    rec.metrics("tsaatt", &pre_log)?;
    let tsaatt_pretrain = Some(PretrainSummary {
        first_100_mse: first_steps_mean(&pre_log, Stage::Tsaatt, 100).unwrap_or(f64::NAN),
        epoch_mse: epoch_losses(&pre_log, Stage::Tsaatt),
    });
    rec.lap("tsaatt");

    let mut warm = base.clone();
    let warm_log = run_stage(&mut warm, Stage::Warmup, &data, plan, seed)?;
    rec.metrics("warmup", &warm_log)?;
    rec.lap("warmup");

    let branch = |variant: Variant, acoustic_from: Option<&TrainState>| -> Result<(TrainState, Vec<MetricRecord>)> {
        let mut s = warm.clone();
        s.variant = variant;
        if let Some(src) = acoustic_from {
            let ids = s.params.layout.tsaatt;
            for id in [ids.w_a, ids.w_s, ids.b_s] {
                s.params.store.set(id, src.params.store.value(id).clone())?;
            }
            s.completed = vec![Stage::Mlm, Stage::Tsaatt, Stage::Warmup];
        }
        let log = run_stage(&mut s, Stage::Finetune, &data, plan, seed)?;
        Ok((s, log))
    };

    let (vanilla, log) = branch(Variant::Vanilla, None)?;
    rec.metrics("vanilla_finetune", &log)?;
    rec.checkpoint("vanilla", &vanilla)?;
    let vanilla_asr = score_model(&vanilla, corpus, Transcript::Asr)?;
    let vanilla_clean = score_model(&vanilla, corpus, Transcript::Clean)?;
    rec.lap("vanilla");

    let (ae, log) = branch(Variant::Aebert, Some(&pretrained))?;
    rec.metrics("aebert_finetune", &log)?;
    rec.checkpoint("aebert", &ae)?;
    let ae_score = score_model(&ae, corpus, Transcript::Asr)?;
    rec.lap("aebert");

    let (ae_nopre, log) = branch(Variant::Aebert, None)?;
    rec.metrics("aebert_nopretrain_finetune", &log)?;
    rec.checkpoint("aebert_nopretrain", &ae_nopre)?;
    let ae_nopre_score = score_model(&ae_nopre, corpus, Transcript::Asr)?;
    rec.lap("aebert_nopretrain");

    systems.push(row("vanilla", "Vanilla BERT", "", vanilla_asr.clone()));
    systems.push(row("aebert", "aeBERT", "w/ TSAAtt Pretraining", ae_score));
    systems.push(row("aebert_nopretrain", "aeBERT", "w/o TSAAtt Pretraining", ae_nopre_score));

    let mut transcripts = Vec::new();
    if cfg.clean_reference {
        let mut clean = base.clone();
        clean.variant = Variant::Vanilla;
        clean.transcript = Transcript::Clean;
        let mut log = Vec::new();
        for st in [Stage::Warmup, Stage::Finetune] {
            log.extend(run_stage(&mut clean, st, &data, plan, seed)?);
        }
        rec.metrics("vanilla_clean", &log)?;
        rec.checkpoint("vanilla_clean", &clean)?;
        transcripts.push(TranscriptRow {
            train: Transcript::Clean,
            eval: Transcript::Clean,
            score: score_model(&clean, corpus, Transcript::Clean)?,
        });
        rec.lap("vanilla_clean");
    }
    transcripts.push(TranscriptRow {
        train: Transcript::Asr,
        eval: Transcript::Clean,
        score: vanilla_clean,
    });
    transcripts.push(TranscriptRow {
        train: Transcript::Asr,
        eval: Transcript::Asr,
        score: vanilla_asr,
    });

    let report = ExperimentReport {
        rho: corpus.manifest.gen.rho,
        seed,
        systems,
        transcripts,
        tsaatt_pretrain,
        seconds: rec.seconds,
    };
    if let Some(dir) = out {
        write_report(dir, cfg, &report)?;
    }
    Ok(report)
}

pub const RESULTS_FILE: &str = "results.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn write_report(dir: &Path, cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join(RESULTS_FILE), report)?;
    let t1 = dir.join("table1.md");
    fs::write(&t1, report.table1_markdown()).map_err(|e| Error::io(&t1, e))?;
    let t2 = dir.join("table2.md");
    fs::write(&t2, report.table2_markdown()).map_err(|e| Error::io(&t2, e))
}
