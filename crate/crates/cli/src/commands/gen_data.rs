use std::path::PathBuf;

use aeqa::data::{generate, Corpus, Vocabulary};
use aeqa::mcqa::Exemplar;

use crate::config::{require, GenFlags, RunConfig};
use crate::failure::{data, CmdResult, Failure};

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// Output directory for train/dev/test JSONL and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
}

/// Tokens sampled for the nearest-prototype fidelity check.
const AUDIT_TOKENS: usize = 5000;
const AUDIT_MIN_DECODE: f64 = 0.99;

pub fn run(mut cfg: RunConfig, seed: u64, args: GenDataArgs) -> CmdResult {
    args.gen.apply(&mut cfg.gen);
    cfg.gen.seed = seed;
    if args.out.is_some() {
        cfg.out = args.out;
    }
    let out = require(cfg.out.clone(), "--out")?;
    let corpus = generate(&cfg.gen)?;
    data(corpus.save(&out))?;
    cfg.write(&out)?;
    let summary = audit(&corpus, &out)?;
    eprintln!(
        "wrote {} train / {} dev / {} test exemplars to {} (rho {})",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display(),
        cfg.gen.rho
    );
    eprintln!("{summary}");
    Ok(())
}

/// Rereads what was written and checks the generator's contracts.
fn audit(corpus: &Corpus, dir: &std::path::Path) -> CmdResult<String> {
    let reread = data(Corpus::load(dir))?;
    if reread != *corpus {
        return Err(Failure::Verify(format!(
            "audit: {} does not reload to the generated corpus",
            dir.display()
        )));
    }
    let all: Vec<&Exemplar> = corpus.train.iter().chain(&corpus.dev).chain(&corpus.test).collect();
    for ex in &all {
        let passage = &ex.pqc.passage.true_ids;
        let found: Vec<usize> = (0..ex.pqc.choices.len())
            .filter(|&i| ex.pqc.choices[i].true_ids.iter().all(|t| passage.contains(t)))
            .collect();
        if found != [ex.answer] {
            return Err(Failure::Verify(format!(
                "audit: {}: choices {found:?} occur in the passage, answer is {}",
                ex.pqc.id, ex.answer
            )));
        }
    }
    let clean_note = if corpus.manifest.gen.rho == 0.0 {
        for ex in &all {
            let fields = std::iter::once(&ex.pqc.passage)
                .chain(std::iter::once(&ex.pqc.question))
                .chain(&ex.pqc.choices);
            for f in fields {
                if f.asr_ids != f.true_ids {
                    return Err(Failure::Verify(format!(
                        "audit: {}: rho is 0 but a transcript differs from its tokens",
                        ex.pqc.id
                    )));
                }
            }
        }
        ", transcripts equal tokens"
    } else {
        ""
    };
    let vocab = data(corpus.vocabulary())?;
    let (hits, total) = decode_rate(&vocab, &all);
    let rate = if total == 0 { 1.0 } else { hits as f64 / total as f64 };
    if rate < AUDIT_MIN_DECODE {
        return Err(Failure::Verify(format!(
            "audit: nearest-prototype decoding recovers {hits}/{total} tokens, below {AUDIT_MIN_DECODE}"
        )));
    }
    Ok(format!(
        "audit passed: {} exemplars reload exactly, one matching choice each{clean_note}, \
         nearest-prototype decoding {hits}/{total}",
        all.len()
    ))
}

/// Decodes the mean frame of the first tokens to the nearest prototype.
fn decode_rate(vocab: &Vocabulary, exemplars: &[&Exemplar]) -> (usize, usize) {
    let d_a = vocab.d_a();
    let (mut hits, mut total) = (0, 0);
    'outer: for ex in exemplars {
        let fields = std::iter::once(&ex.pqc.passage)
            .chain(std::iter::once(&ex.pqc.question))
            .chain(&ex.pqc.choices);
        for f in fields {
            for (id, frames) in f.true_ids.iter().zip(&f.frames) {
                if total == AUDIT_TOKENS {
                    break 'outer;
                }
                let m = frames.frame_count();
                let mut mean = vec![0.0; d_a];
                for j in 0..m {
                    for (acc, v) in mean.iter_mut().zip(frames.frame(j)) {
                        *acc += v / m as f64;
                    }
                }
                let nearest = (0..vocab.size)
                    .filter(|&t| vocab.is_content(t))
                    .min_by(|&a, &b| dist(&mean, vocab.proto.row(a)).total_cmp(&dist(&mean, vocab.proto.row(b))))
                    .expect("content tokens exist");
                hits += usize::from(nearest == *id);
                total += 1;
            }
        }
    }
    (hits, total)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
