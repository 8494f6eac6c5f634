use std::fs;
use std::path::{Path, PathBuf};

use aeqa::data::GenConfig;
use aeqa::encoder::EncoderConfig;
use aeqa::mcqa::Transcript;
use aeqa::training::{PretrainTarget, Stage, StageConfig, TrainPlan, Variant};
use serde::{Deserialize, Serialize};

use crate::failure::{CmdResult, Failure};

pub const SEED_ENV: &str = "AEQA_SEED";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Everything a run depends on besides its input files. Flags override
/// the fields they mirror; the effective value is written next to the
/// run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stages: Option<Vec<Stage>>,
    pub variant: Variant,
    pub condition: Transcript,
    pub baselines: Vec<String>,
    pub clean_reference: bool,
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub plan: TrainPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            data: None,
            out: None,
            init: None,
            checkpoint: None,
            stages: None,
            variant: Variant::Aebert,
            condition: Transcript::Asr,
            baselines: vec!["length".into(), "similarity".into(), "random".into()],
            clean_reference: true,
            gen: GenConfig::default(),
            encoder: EncoderConfig::default(),
            plan: TrainPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CmdResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        read_json(path)
    }

    /// Seed precedence: flag, config file, `AEQA_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CmdResult<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn write(&self, dir: &Path) -> CmdResult {
        write_json(&dir.join(RUN_CONFIG_FILE), self)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), e.line())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn require(path: Option<PathBuf>, flag: &str) -> CmdResult<PathBuf> {
    path.ok_or_else(|| Failure::Usage(format!("{flag} is required (flag or config field)")))
}

/// Generator overrides shared by `gen-data` and `experiment`.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct GenFlags {
    /// Corruption rate of the transcripts.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Frame feature dimension.
    #[arg(long)]
    pub d_a: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Key/value facts per passage.
    #[arg(long)]
    pub facts: Option<usize>,
    #[arg(long)]
    pub key_pool: Option<usize>,
    #[arg(long)]
    pub value_pool: Option<usize>,
    /// Fewest frames per token.
    #[arg(long)]
    pub m_lo: Option<usize>,
    /// Most frames per token.
    #[arg(long)]
    pub m_hi: Option<usize>,
    /// Per-coordinate frame noise.
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl GenFlags {
    pub fn apply(&self, g: &mut GenConfig) {
        set(&mut g.rho, self.rho);
        set(&mut g.n_train, self.n_train);
        set(&mut g.n_dev, self.n_dev);
        set(&mut g.n_test, self.n_test);
        set(&mut g.d_a, self.d_a);
        set(&mut g.vocab_size, self.vocab_size);
        set(&mut g.facts, self.facts);
        set(&mut g.key_pool, self.key_pool);
        set(&mut g.value_pool, self.value_pool);
        set(&mut g.m_lo, self.m_lo);
        set(&mut g.m_hi, self.m_hi);
        set(&mut g.sigma, self.sigma);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanPreset {
    /// Schedule for training the small encoder from scratch.
    Desk,
    /// The published rates and accumulation.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetFlag {
    True,
    Asr,
}

/// Model and schedule overrides shared by `train` and `experiment`.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    /// Base schedule, applied before the per-stage overrides below.
    #[arg(long, value_enum)]
    pub plan: Option<PlanPreset>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub mlm_epochs: Option<usize>,
    #[arg(long)]
    pub mlm_lr: Option<f64>,
    #[arg(long)]
    pub tsaatt_epochs: Option<usize>,
    #[arg(long)]
    pub tsaatt_lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_lr: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    /// Micro-batch size for every stage.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Accumulated micro-batches per update for every stage.
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// Regression target of acoustic pretraining.
    #[arg(long, value_enum)]
    pub pretrain_target: Option<TargetFlag>,
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self.plan {
            Some(PlanPreset::Desk) => cfg.plan = TrainPlan::desk(),
            Some(PlanPreset::Paper) => cfg.plan = TrainPlan::paper(),
            None => {}
        }
        let e = &mut cfg.encoder;
        set(&mut e.d_model, self.d_model);
        set(&mut e.layers, self.layers);
        set(&mut e.heads, self.heads);
        set(&mut e.d_ff, self.d_ff);
        set(&mut e.dropout, self.dropout);
        let p = &mut cfg.plan;
        let stage = |s: &mut StageConfig, epochs: Option<usize>, lr: Option<f64>| {
            set(&mut s.epochs, epochs);
            set(&mut s.lr, lr);
            set(&mut s.batch_size, self.batch_size);
            set(&mut s.accumulation, self.accumulation);
        };
        stage(&mut p.mlm, self.mlm_epochs, self.mlm_lr);
        stage(&mut p.tsaatt, self.tsaatt_epochs, self.tsaatt_lr);
        stage(&mut p.warmup, self.warmup_epochs, self.warmup_lr);
        stage(&mut p.finetune, self.finetune_epochs, self.finetune_lr);
        match self.pretrain_target {
            Some(TargetFlag::True) => p.pretrain_target = PretrainTarget::True,
            Some(TargetFlag::Asr) => p.pretrain_target = PretrainTarget::Asr,
            None => {}
        }
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}
