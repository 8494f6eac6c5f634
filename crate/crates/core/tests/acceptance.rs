//! Acceptance criteria, one pass/fail line each. Run with `--nocapture` to
//! see the lines; the test fails if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use aeqa::baselines::{
    accuracy, choice_length, choice_similarity, random_predictions, EmbeddingLookup, LengthMode, SimilarityMode,
};
use aeqa::data::{generate, Corpus, GenConfig};
use aeqa::encoder::{embed_input, encode, relevance, EncoderConfig, ModelParams};
use aeqa::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use aeqa::mcqa::{argmax, choice_distribution, Pqc, Transcript};
use aeqa::numerics::{Graph, ParamId, Tensor};
use aeqa::rng::Stream;
use aeqa::training::{load_checkpoint, save_checkpoint, TrainPlan};
use aeqa::tsaatt::{AcousticFrames, TsaattParams};
use aeqa::verify::{gradcheck_suite, suite_config};

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        passed,
        detail,
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = gradcheck_suite(&suite_config(), None).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = report.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let cfg = suite_config();
    let shape_ok = cfg.acoustic_dim == 4 && cfg.d_model == 8 && cfg.layers == 1 && cfg.heads == 1;
    let passed = report.passed() && worst <= 1e-4 && secs <= 120.0 && shape_ok;
    outcome(
        1,
        "gradient fidelity",
        passed,
        format!("{} checks, max rel err {worst:.2e}, {secs:.1}s", report.entries.len()),
    )
}

fn random_frames<R: Rng>(d_a: usize, m: usize, rng: &mut R) -> AcousticFrames {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d_a).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    AcousticFrames::from_rows(d_a, &rows).unwrap()
}

fn attention_structure() -> Outcome {
    let (d_a, d_t) = (6, 8);
    let mut rng = Stream::new(21).rng();
    let (mut row_err, mut hull_violation, mut single_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let params = TsaattParams::new(
            Tensor::randn(&[d_a, d_a], 1.0, &mut rng),
            Tensor::randn(&[d_t, d_a], 1.0, &mut rng),
            Tensor::randn(&[d_t], 1.0, &mut rng),
        )
        .unwrap();
        let m = rng.random_range(1..9);
        let frames = random_frames(d_a, m, &mut rng);
        let a = params.attend(&frames).unwrap();
        for i in 0..d_a {
            row_err = row_err.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let v = params.pool(&frames, &a).unwrap();
        for i in 0..d_a {
            let col: Vec<f64> = (0..m).map(|j| frames.frame(j)[i]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let x = v.data()[i];
            hull_violation = hull_violation.max(lo - x).max(x - hi);
        }
        let single = random_frames(d_a, 1, &mut rng);
        let a1 = params.attend(&single).unwrap();
        let v1 = params.pool(&single, &a1).unwrap();
        for (x, y) in v1.data().iter().zip(single.frame(0)) {
            single_err = single_err.max((x - y).abs());
        }
    }
    let passed = row_err <= 1e-10 && hull_violation <= 1e-12 && single_err <= 1e-12;
    outcome(
        2,
        "attention pooling structure",
        passed,
        format!("row-sum err {row_err:.1e}, hull overshoot {hull_violation:.1e}, single-frame err {single_err:.1e}"),
    )
}

fn randomize(p: &mut ModelParams, seed: u64) {
    let mut rng = Stream::new(seed).rng();
    let ids: Vec<ParamId> = p.store.ids().collect();
    for id in ids {
        let shape = p.store.value(id).shape().to_vec();
        let mut t = Tensor::randn(&shape, 0.4, &mut rng);
        if p.store.name(id).ends_with("gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        p.store.set(id, t).unwrap();
    }
}

fn zero_acoustic_equivalence() -> Outcome {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 2,
        ..EncoderConfig::tiny()
    };
    let mut worst = 0.0f64;
    let mut rng = Stream::new(31).rng();
    for k in 0..100u64 {
        let mut p = ModelParams::init(&cfg, Stream::new(k)).unwrap();
        randomize(&mut p, 1000 + k);
        let n = rng.random_range(3..=cfg.max_len);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let split = rng.random_range(1..n);
        let segs: Vec<usize> = (0..n).map(|i| usize::from(i >= split)).collect();
        let pos: Vec<usize> = (0..n).collect();
        let mask = vec![true; n];
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        let zeros = g.constant(Tensor::zeros(&[n, cfg.d_model]));
        let mut run = |ac| {
            let x = embed_input(&mut g, &m, &ids, &segs, &pos, ac).unwrap();
            let out = encode(&mut g, &m, x, &mask).unwrap();
            let cls = out.cls(&mut g).unwrap();
            let r = relevance(&mut g, &m, cls).unwrap();
            (out.hidden, r)
        };
        let (h_ae, r_ae) = run(Some(zeros));
        let (h_text, r_text) = run(None);
        worst = worst
            .max(g.value(h_ae).max_abs_diff(g.value(h_text)))
            .max(g.value(r_ae).max_abs_diff(g.value(r_text)));
    }
    outcome(
        3,
        "zero-acoustic equivalence",
        worst <= 1e-10,
        format!("max abs diff {worst:.1e} over 100 inputs"),
    )
}

fn choice_distribution_contract() -> Outcome {
    let mut rng = Stream::new(41).rng();
    let (mut sum_err, mut shift_err, mut argmax_mismatch) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let p = choice_distribution(&r);
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(choice_distribution(&shifted)) {
            shift_err = shift_err.max((a - b).abs());
        }
        let first_max = |v: &[f64]| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v.iter().position(|&x| x == m).unwrap()
        };
        if argmax(&p) != argmax(&r) || argmax(&r) != first_max(&r) {
            argmax_mismatch += 1;
        }
    }
    let passed = sum_err <= 1e-12 && shift_err <= 1e-12 && argmax_mismatch == 0;
    outcome(
        4,
        "choice distribution contract",
        passed,
        format!("sum err {sum_err:.1e}, shift err {shift_err:.1e}, argmax mismatches {argmax_mismatch}/1000"),
    )
}

fn length_oracle(pqc: &Pqc, longest: bool) -> usize {
    let lens: Vec<usize> = pqc.choices.iter().map(|c| c.asr_ids.len()).collect();
    let target = if longest {
        *lens.iter().max().unwrap()
    } else {
        *lens.iter().min().unwrap()
    };
    lens.iter().position(|&l| l == target).unwrap()
}

fn similarity_oracle(pqc: &Pqc, table: &Tensor, against_passage: bool) -> usize {
    let mean = |ids: &[usize]| -> Vec<f64> {
        let d = table.cols();
        let mut v = vec![0.0; d];
        for &t in ids {
            for (j, x) in v.iter_mut().enumerate() {
                *x += table.get(t, j);
            }
        }
        v.iter().map(|x| x / ids.len() as f64).collect()
    };
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (norm(a) * norm(b))
    };
    let reference = if against_passage { &pqc.passage } else { &pqc.question };
    let r = mean(&reference.asr_ids);
    let sims: Vec<f64> = pqc.choices.iter().map(|c| cos(&r, &mean(&c.asr_ids))).collect();
    let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    sims.iter().position(|&s| s == best).unwrap()
}

fn baseline_oracles() -> Outcome {
    let gen = GenConfig {
        n_train: 1000,
        n_dev: 500,
        n_test: 0,
        seed: 51,
        ..GenConfig::default()
    };
    let corpus = generate(&gen).unwrap();
    let mut rng = Stream::new(52).rng();
    let table = Tensor::randn(&[gen.vocab_size, 16], 1.0, &mut rng);
    let emb = EmbeddingLookup::new(table.clone()).unwrap();

    // The generated choices are single tokens, so the length baseline is
    // also checked on copies whose choices get random lengths.
    let mut varied = corpus.train.clone();
    for ex in &mut varied {
        for c in &mut ex.pqc.choices {
            let len = rng.random_range(1..6);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(5..gen.vocab_size)).collect();
            c.asr_ids = ids.clone();
            c.true_ids = ids;
        }
    }

    let mut mismatches = 0usize;
    for ex in corpus.train.iter().chain(&varied) {
        let p = &ex.pqc;
        for (mode, longest) in [(LengthMode::Longest, true), (LengthMode::Shortest, false)] {
            mismatches += usize::from(choice_length(p, mode, Transcript::Asr) != length_oracle(p, longest));
        }
        for (mode, passage) in [(SimilarityMode::Passage, true), (SimilarityMode::Question, false)] {
            let got = choice_similarity(p, mode, &emb, Transcript::Asr).unwrap();
            mismatches += usize::from(got != similarity_oracle(p, &table, passage));
        }
    }
    let answers: Vec<usize> = corpus.dev.iter().map(|e| e.answer).collect();
    let random = accuracy(&random_predictions(answers.len(), Stream::new(53)), &answers).unwrap();
    let passed = mismatches == 0 && (random - 0.25).abs() <= 0.05;
    outcome(
        5,
        "baseline oracle equivalence",
        passed,
        format!("{mismatches} oracle mismatches over 2000 exemplars, random accuracy {random:.3} on 500"),
    )
}

fn desk_experiment(out: &Path) -> (ExperimentReport, f64) {
    let start = Instant::now();
    let corpus = generate(&GenConfig::default()).unwrap();
    let cfg = ExperimentConfig::new(EncoderConfig::default(), TrainPlan::desk(), 0);
    let report = run_experiment(&corpus, &cfg, Some(out)).unwrap();
    (report, start.elapsed().as_secs_f64())
}

fn table1(report: &ExperimentReport, secs: f64) -> Outcome {
    let test = |k: &str| report.system(k).map(|s| s.test).unwrap_or(f64::NAN);
    let length = test("choice_length_longest").max(test("choice_length_shortest"));
    let (vanilla, ae) = (test("vanilla"), test("aebert"));
    let passed = length <= 0.35 && vanilla >= 0.60 && ae >= vanilla + 0.05 && secs <= 1800.0;
    outcome(
        6,
        "systems ordering on the default task",
        passed,
        format!("test: choice length {length:.3}, vanilla {vanilla:.3}, aeBERT {ae:.3}; pipeline {secs:.0}s"),
    )
}

fn pretraining_ablation(report: &ExperimentReport) -> Outcome {
    let dev = |k: &str| report.system(k).map(|s| s.dev).unwrap_or(f64::NAN);
    let (with, without) = (dev("aebert"), dev("aebert_nopretrain"));
    outcome(
        7,
        "acoustic pretraining ablation",
        with >= without - 0.02,
        format!("dev: with pretraining {with:.3}, without {without:.3}"),
    )
}

fn transcript_matrix(report: &ExperimentReport) -> Outcome {
    let cell = |t, e| report.transcript(t, e).map(|s| s.test).unwrap_or(f64::NAN);
    let clean = cell(Transcript::Clean, Transcript::Clean);
    let cross = cell(Transcript::Asr, Transcript::Clean);
    let asr = cell(Transcript::Asr, Transcript::Asr);
    let table = report.table2_markdown();
    let laid_out = report.transcripts.len() == 3 && table.lines().count() >= 5;
    outcome(
        8,
        "transcript matrix",
        clean >= asr && cross.is_finite() && laid_out,
        format!("test: clean/clean {clean:.3}, asr/clean {cross:.3}, asr/asr {asr:.3}"),
    )
}

fn pretraining_efficacy(report: &ExperimentReport) -> Outcome {
    let (first, epoch) = report
        .tsaatt_pretrain
        .as_ref()
        .map(|p| (p.first_100_mse, p.epoch_mse.first().copied().unwrap_or(f64::NAN)))
        .unwrap_or((f64::NAN, f64::NAN));
    outcome(
        9,
        "acoustic pretraining efficacy",
        epoch <= 0.5 * first,
        format!("epoch MSE {epoch:.4e} vs first-100 mean {first:.4e} (ratio {:.3})", epoch / first),
    )
}

fn files_equal(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    names.iter().all(|n| {
        let (x, y) = (a.join(n), b.join(n));
        if x.is_dir() {
            files_equal(&x, &y)
        } else {
            fs::read(&x).ok() == fs::read(&y).ok()
        }
    })
}

fn determinism_and_persistence() -> Outcome {
    let gen = GenConfig {
        n_train: 40,
        n_dev: 12,
        n_test: 12,
        seed: 61,
        ..GenConfig::default()
    };
    let encoder = EncoderConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        max_len: 32,
        ..EncoderConfig::default()
    };
    let mut plan = TrainPlan::desk();
    plan.mlm.epochs = 2;
    let cfg = ExperimentConfig::new(encoder, plan, 62);
    let corpus = generate(&gen).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let reports: Vec<String> = dirs
        .iter()
        .map(|d| serde_json::to_string(&run_experiment(&corpus, &cfg, Some(d.path())).unwrap()).unwrap())
        .collect();
    let same_metrics = reports[0] == reports[1] && files_equal(dirs[0].path(), dirs[1].path());

    let ck = dirs[0].path().join("checkpoints").join("aebert");
    let resaved = tempfile::tempdir().unwrap();
    save_checkpoint(resaved.path(), &load_checkpoint(&ck).unwrap()).unwrap();
    let ck_identical = files_equal(&ck, resaved.path());

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    corpus.save(a.path()).unwrap();
    let loaded = Corpus::load(a.path()).unwrap();
    loaded.save(b.path()).unwrap();
    let data_lossless = loaded == corpus && files_equal(a.path(), b.path());

    outcome(
        10,
        "determinism and persistence",
        same_metrics && ck_identical && data_lossless,
        format!("identical reruns {same_metrics}, checkpoint round trip {ck_identical}, dataset round trip {data_lossless}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        gradient_fidelity(),
        attention_structure(),
        zero_acoustic_equivalence(),
        choice_distribution_contract(),
        baseline_oracles(),
    ];
    let run_dir = tempfile::tempdir().unwrap();
    let (report, secs) = desk_experiment(run_dir.path());
    println!("{}", report.table1_markdown());
    println!("{}", report.table2_markdown());
    results.push(table1(&report, secs));
    results.push(pretraining_ablation(&report));
    results.push(transcript_matrix(&report));
    results.push(pretraining_efficacy(&report));
    results.push(determinism_and_persistence());

    for r in &results {
        println!(
            "criterion {:>2} {:<4} {}: {}",
            r.id,
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
