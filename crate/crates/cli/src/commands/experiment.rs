use std::path::PathBuf;

use aeqa::data::{generate, Corpus};
use aeqa::experiment::{run_experiment, ExperimentConfig};

use crate::config::{require, GenFlags, ModelFlags, RunConfig};
use crate::failure::{data, CmdResult};

#[derive(Debug, clap::Args)]
pub struct ExperimentArgs {
    /// Dataset directory; generated from the generator settings if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the text-only model trained on clean transcripts.
    #[arg(long)]
    pub no_clean_reference: bool,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

/// Runs every system of the comparison tables on one corpus.
pub fn run(mut cfg: RunConfig, seed: u64, args: ExperimentArgs) -> CmdResult {
    args.gen.apply(&mut cfg.gen);
    args.model.apply(&mut cfg);
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if args.no_clean_reference {
        cfg.clean_reference = false;
    }
    let out = require(cfg.out.clone(), "--out")?;
    let corpus = match &cfg.data {
        Some(dir) => data(Corpus::load(dir))?,
        None => {
            cfg.gen.seed = seed;
            generate(&cfg.gen)?
        }
    };
    cfg.gen = corpus.manifest.gen.clone();
    cfg.encoder.acoustic_dim = cfg.gen.d_a;
    cfg.encoder.vocab_size = cfg.gen.vocab_size;
    cfg.encoder.validate()?;
    cfg.plan.validate()?;
    cfg.write(&out)?;

    let exp = ExperimentConfig {
        encoder: cfg.encoder.clone(),
        plan: cfg.plan.clone(),
        seed,
        clean_reference: cfg.clean_reference,
    };
    let report = run_experiment(&corpus, &exp, Some(&out))?;
    println!("{}", report.table1_markdown());
    println!("{}", report.table2_markdown());
    if let Some(p) = &report.tsaatt_pretrain {
        let last = p.epoch_mse.last().copied().unwrap_or(f64::NAN);
        println!("acoustic pretraining MSE: first 100 steps {:.6}, final epoch {last:.6}", p.first_100_mse);
    }
    for (phase, secs) in &report.seconds {
        eprintln!("{phase}: {secs:.1} s");
    }
    eprintln!("total: {:.1} s", report.total_seconds());
    Ok(())
}
