//! Synthetic spoken multiple-choice corpus.
//!
//! A passage is a list of key/value facts, the question names one key and
//! the choices are single value tokens. Transcripts go through a
//! substitution channel with rate `rho`; frames are always generated from
//! the true tokens, so the acoustic channel can recover what the
//! transcript lost.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::FIRST_CONTENT;
use crate::error::{Error, Result};
use crate::mcqa::{Exemplar, Field, Pqc, NUM_CHOICES};
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::tsaatt::AcousticFrames;

pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub rho: f64,
    pub m_lo: usize,
    pub m_hi: usize,
    pub sigma: f64,
    pub facts: usize,
    pub key_pool: usize,
    pub value_pool: usize,
    pub vocab_size: usize,
    pub d_a: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            rho: 0.2,
            m_lo: 2,
            m_hi: 6,
            sigma: 0.1,
            facts: 6,
            key_pool: 64,
            value_pool: 128,
            vocab_size: 256,
            d_a: 43,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.m_lo < 1 || self.m_hi < self.m_lo {
            return bad(format!("frame range [{}, {}] is empty or starts below 1", self.m_lo, self.m_hi));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        if self.d_a == 0 {
            return bad("d_a must be positive".into());
        }
        if self.facts == 0 || self.key_pool < self.facts {
            return bad(format!("{} facts need at least as many keys, pool has {}", self.facts, self.key_pool));
        }
        if self.value_pool < self.facts + NUM_CHOICES - 1 {
            return bad(format!(
                "value pool of {} cannot hold {} passage values plus {} distractors",
                self.value_pool,
                self.facts,
                NUM_CHOICES - 1
            ));
        }
        if self.content_size() < self.key_pool + self.value_pool + 1 {
            return bad(format!(
                "vocabulary of {} has {} content ids, pools need {} plus one question word",
                self.vocab_size,
                self.content_size(),
                self.key_pool + self.value_pool
            ));
        }
        Ok(())
    }

    pub fn content_size(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT)
    }
}

/// Token id layout and the per-token acoustic prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub size: usize,
    pub keys: std::ops::Range<usize>,
    pub values: std::ops::Range<usize>,
    pub fillers: std::ops::Range<usize>,
    /// `size × d_a`; rows of special ids are zero and never used.
    pub proto: Tensor,
}

impl Vocabulary {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let keys = FIRST_CONTENT..FIRST_CONTENT + cfg.key_pool;
        let values = keys.end..keys.end + cfg.value_pool;
        let fillers = values.end..cfg.vocab_size;
        let mut rng = Stream::new(cfg.seed).derive("vocab").rng();
        let mut proto = Tensor::randn(&[cfg.vocab_size, cfg.d_a], 1.0, &mut rng);
        proto.data_mut()[..FIRST_CONTENT * cfg.d_a].fill(0.0);
        Ok(Vocabulary {
            size: cfg.vocab_size,
            keys,
            values,
            fillers,
            proto,
        })
    }

    pub fn d_a(&self) -> usize {
        self.proto.cols()
    }

    pub fn is_content(&self, id: usize) -> bool {
        (FIRST_CONTENT..self.size).contains(&id)
    }
}

/// Replaces each content token, with probability `rho`, by a uniformly
/// drawn different content token. Special ids pass through.
pub fn corrupt<R: Rng + ?Sized>(true_ids: &[usize], rho: f64, vocab_size: usize, rng: &mut R) -> Vec<usize> {
    let n = vocab_size.saturating_sub(FIRST_CONTENT);
    true_ids
        .iter()
        .map(|&t| {
            let flip = rng.random::<f64>() < rho;
            if !flip || t < FIRST_CONTENT || n < 2 {
                return t;
            }
            let r = FIRST_CONTENT + rng.random_range(0..n - 1);
            if r >= t {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Frame matrix for one token: `m ~ U[m_lo, m_hi]` frames, each the token's
/// prototype plus N(0, σ²) noise per coordinate.
pub fn frames_for_token<R: Rng + ?Sized>(
    true_id: usize,
    vocab: &Vocabulary,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<AcousticFrames> {
    if !vocab.is_content(true_id) {
        return Err(Error::InvalidInput(format!("token {true_id} is not a content token")));
    }
    let m = rng.random_range(cfg.m_lo..=cfg.m_hi);
    let proto = vocab.proto.row(true_id);
    let rows: Vec<Vec<f64>> = if cfg.sigma == 0.0 {
        vec![proto.to_vec(); m]
    } else {
        let noise = Normal::new(0.0, cfg.sigma).expect("validated sigma");
        (0..m).map(|_| proto.iter().map(|p| p + noise.sample(rng)).collect()).collect()
    };
    AcousticFrames::from_rows(vocab.d_a(), &rows)
}

fn make_field<R: Rng + ?Sized>(ids: Vec<usize>, vocab: &Vocabulary, cfg: &GenConfig, rng: &mut R) -> Result<Field> {
    let asr_ids = corrupt(&ids, cfg.rho, cfg.vocab_size, rng);
    let frames = ids
        .iter()
        .map(|&t| frames_for_token(t, vocab, cfg, rng))
        .collect::<Result<_>>()?;
    Ok(Field {
        true_ids: ids,
        asr_ids,
        frames,
    })
}

fn pick<R: Rng + ?Sized>(range: &std::ops::Range<usize>, k: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, range.len(), k).into_iter().map(|i| range.start + i).collect()
}

/// One exemplar. The stream fully determines it, independent of any other
/// exemplar.
pub fn generate_exemplar(id: String, vocab: &Vocabulary, cfg: &GenConfig, stream: Stream) -> Result<Exemplar> {
    let mut rng = stream.rng();
    let keys = pick(&vocab.keys, cfg.facts, &mut rng);
    // Passage values and distractors are disjoint: draw them together.
    let vals = pick(&vocab.values, cfg.facts + NUM_CHOICES - 1, &mut rng);
    let (passage_vals, distractors) = vals.split_at(cfg.facts);

    let queried = rng.random_range(0..cfg.facts);
    let qword = vocab.fillers.start + rng.random_range(0..vocab.fillers.len());
    let answer = rng.random_range(0..NUM_CHOICES);

    let mut choice_ids = distractors.to_vec();
    choice_ids.insert(answer, passage_vals[queried]);

    let passage: Vec<usize> = keys.iter().zip(passage_vals).flat_map(|(k, v)| [*k, *v]).collect();
    let passage = make_field(passage, vocab, cfg, &mut rng)?;
    let question = make_field(vec![qword, keys[queried]], vocab, cfg, &mut rng)?;
    let choices = choice_ids
        .into_iter()
        .map(|c| make_field(vec![c], vocab, cfg, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Exemplar {
        pqc: Pqc {
            id,
            passage,
            question,
            choices,
        },
        answer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub gen: GenConfig,
    pub vocab_seed: u64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Generated or loaded train/dev/test splits with their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub train: Vec<Exemplar>,
    pub dev: Vec<Exemplar>,
    pub test: Vec<Exemplar>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Exemplar]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.manifest.gen)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SPLITS {
            save_jsonl(&dir.join(format!("{name}.jsonl")), self.split(name)?)?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: dataset format version {}, expected {FORMAT_VERSION}",
                path.display(),
                manifest.version
            )));
        }
        manifest.gen.validate()?;
        let opts = LoadOptions {
            d_a: Some(manifest.gen.d_a),
            vocab_size: Some(manifest.gen.vocab_size),
        };
        let mut splits = Vec::with_capacity(3);
        for name in SPLITS {
            splits.push(load_jsonl(&dir.join(format!("{name}.jsonl")), &opts)?);
        }
        let test = splits.pop().unwrap_or_default();
        let dev = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Corpus {
            manifest,
            train,
            dev,
            test,
        })
    }
}

/// Generates all three splits. Exemplar `i` of split `s` draws only from
/// the stream `(seed, s, i)`.
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    let vocab = Vocabulary::new(cfg)?;
    let root = Stream::new(cfg.seed).derive("exemplars");
    let make = |name: &str, n: usize| -> Result<Vec<Exemplar>> {
        let s = root.derive(name);
        (0..n)
            .map(|i| generate_exemplar(format!("{name}-{i:05}"), &vocab, cfg, s.index(i as u64)))
            .collect()
    };
    Ok(Corpus {
        manifest: Manifest {
            version: FORMAT_VERSION,
            gen: cfg.clone(),
            vocab_seed: cfg.seed,
            counts: Counts {
                train: cfg.n_train,
                dev: cfg.n_dev,
                test: cfg.n_test,
            },
        },
        train: make("train", cfg.n_train)?,
        dev: make("dev", cfg.n_dev)?,
        test: make("test", cfg.n_test)?,
    })
}

type FrameRows = Vec<Vec<f64>>;

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarRecord {
    pub id: String,
    pub p_true: Vec<usize>,
    pub p_asr: Vec<usize>,
    pub q_true: Vec<usize>,
    pub q_asr: Vec<usize>,
    pub choices_true: Vec<Vec<usize>>,
    pub choices_asr: Vec<Vec<usize>>,
    pub answer: usize,
    pub frames_p: Vec<FrameRows>,
    pub frames_q: Vec<FrameRows>,
    pub frames_c: Vec<Vec<FrameRows>>,
}

impl From<&Exemplar> for ExemplarRecord {
    fn from(ex: &Exemplar) -> Self {
        let p = &ex.pqc;
        let frames = |f: &Field| f.frames.iter().map(AcousticFrames::to_rows).collect::<Vec<_>>();
        ExemplarRecord {
            id: p.id.clone(),
            p_true: p.passage.true_ids.clone(),
            p_asr: p.passage.asr_ids.clone(),
            q_true: p.question.true_ids.clone(),
            q_asr: p.question.asr_ids.clone(),
            choices_true: p.choices.iter().map(|c| c.true_ids.clone()).collect(),
            choices_asr: p.choices.iter().map(|c| c.asr_ids.clone()).collect(),
            answer: ex.answer,
            frames_p: frames(&p.passage),
            frames_q: frames(&p.question),
            frames_c: p.choices.iter().map(frames).collect(),
        }
    }
}

/// Validation applied while reading records.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Required frame width; inferred from the first frame when absent.
    pub d_a: Option<usize>,
    /// Token ids must be content ids below this bound.
    pub vocab_size: Option<usize>,
}

impl ExemplarRecord {
    pub fn into_exemplar(self, opts: &LoadOptions) -> Result<Exemplar> {
        let id = self.id;
        let d_a = match opts.d_a {
            Some(d) => d,
            None => self
                .frames_p
                .iter()
                .chain(&self.frames_q)
                .chain(self.frames_c.iter().flatten())
                .find_map(|t| t.first().map(Vec::len))
                .ok_or_else(|| Error::Format(format!("{id}: no frames to infer the frame width from")))?,
        };
        let field = |what: &str, t: Vec<usize>, a: Vec<usize>, f: Vec<FrameRows>| -> Result<Field> {
            if a.len() != t.len() || f.len() != t.len() {
                return Err(Error::Format(format!(
                    "{id}: {what} has {} reference tokens, {} transcribed tokens, {} frame matrices",
                    t.len(),
                    a.len(),
                    f.len()
                )));
            }
            for (pos, &tok) in t.iter().chain(&a).enumerate() {
                let ok = tok >= FIRST_CONTENT && opts.vocab_size.is_none_or(|v| tok < v);
                if !ok {
                    return Err(Error::Format(format!(
                        "{id}: {what} token {} has unknown or reserved id {tok}",
                        pos % t.len()
                    )));
                }
            }
            let mut frames = Vec::with_capacity(f.len());
            for (pos, rows) in f.into_iter().enumerate() {
                if rows.is_empty() {
                    return Err(Error::Format(format!("{id}: {what} token {pos} has no frames")));
                }
                let m = AcousticFrames::from_rows(d_a, &rows)
                    .map_err(|e| Error::Format(format!("{id}: {what} token {pos}: {e}")))?;
                frames.push(m);
            }
            Ok(Field {
                true_ids: t,
                asr_ids: a,
                frames,
            })
        };
        let passage = field("passage", self.p_true, self.p_asr, self.frames_p)?;
        let question = field("question", self.q_true, self.q_asr, self.frames_q)?;
        let n = self.choices_true.len();
        if self.choices_asr.len() != n || self.frames_c.len() != n {
            return Err(Error::Format(format!("{id}: choice lists disagree in length")));
        }
        let mut choices = Vec::with_capacity(n);
        for (i, ((t, a), f)) in self.choices_true.into_iter().zip(self.choices_asr).zip(self.frames_c).enumerate() {
            choices.push(field(&format!("choice {i}"), t, a, f)?);
        }
        let ex = Exemplar {
            pqc: Pqc {
                id: id.clone(),
                passage,
                question,
                choices,
            },
            answer: self.answer,
        };
        ex.validate()?;
        Ok(ex)
    }
}

pub fn save_jsonl(path: &Path, exemplars: &[Exemplar]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in exemplars {
        serde_json::to_writer(&mut w, &ExemplarRecord::from(ex))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path, opts: &LoadOptions) -> Result<Vec<Exemplar>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: ExemplarRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.into_exemplar(opts).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(rho: f64) -> GenConfig {
        GenConfig {
            n_train: 40,
            n_dev: 10,
            n_test: 10,
            rho,
            d_a: 8,
            seed: 7,
            ..GenConfig::default()
        }
    }

    fn all_fields(ex: &Exemplar) -> Vec<&Field> {
        let p = &ex.pqc;
        let mut v = vec![&p.passage, &p.question];
        v.extend(p.choices.iter());
        v
    }

    #[test]
    fn rho_zero_and_one() {
        let c = generate(&small(0.0)).unwrap();
        for ex in &c.train {
            for f in all_fields(ex) {
                assert_eq!(f.true_ids, f.asr_ids);
            }
        }
        let c = generate(&small(1.0)).unwrap();
        for ex in &c.train {
            for f in all_fields(ex) {
                assert!(f.true_ids.iter().zip(&f.asr_ids).all(|(t, a)| t != a));
            }
        }
    }

    #[test]
    fn corrupt_two_token_vocabulary_flips() {
        let mut rng = Stream::new(1).rng();
        let v = FIRST_CONTENT + 2;
        let ids = vec![5, 6, 6, 5, 1, 2];
        assert_eq!(corrupt(&ids, 1.0, v, &mut rng), vec![6, 5, 5, 6, 1, 2]);
        assert_eq!(corrupt(&ids, 0.0, v, &mut rng), ids);
    }

    #[test]
    fn corrupt_flip_rate() {
        let mut rng = Stream::new(2).rng();
        let ids: Vec<usize> = (0..100_000).map(|i| FIRST_CONTENT + i % 200).collect();
        let out = corrupt(&ids, 0.2, 256, &mut rng);
        let flips = ids.iter().zip(&out).filter(|(a, b)| a != b).count() as f64 / ids.len() as f64;
        assert!((flips - 0.2).abs() < 0.01, "{flips}");
        assert!(out.iter().all(|&t| (FIRST_CONTENT..256).contains(&t)));
    }

    #[test]
    fn frames_contract() {
        let mut cfg = small(0.2);
        cfg.sigma = 0.0;
        let vocab = Vocabulary::new(&cfg).unwrap();
        let mut rng = Stream::new(3).rng();
        let f = frames_for_token(40, &vocab, &cfg, &mut rng).unwrap();
        for j in 0..f.frame_count() {
            assert_eq!(f.frame(j), vocab.proto.row(40));
        }
        assert!(frames_for_token(2, &vocab, &cfg, &mut rng).is_err());

        cfg.sigma = 0.1;
        let mut sum = vec![0.0; cfg.d_a];
        let mut count = 0usize;
        while count < 10_000 {
            let f = frames_for_token(40, &vocab, &cfg, &mut rng).unwrap();
            assert!((cfg.m_lo..=cfg.m_hi).contains(&f.frame_count()));
            for j in 0..f.frame_count() {
                for (s, v) in sum.iter_mut().zip(f.frame(j)) {
                    *s += v;
                }
                count += 1;
            }
        }
        for (s, p) in sum.iter().zip(vocab.proto.row(40)) {
            assert!((s / count as f64 - p).abs() < 3.0 * 0.1 / 100.0);
        }
    }

    #[test]
    fn exemplar_structure() {
        let c = generate(&small(0.3)).unwrap();
        let vocab = c.vocabulary().unwrap();
        let ids: HashSet<_> = c.train.iter().chain(&c.dev).chain(&c.test).map(|e| e.pqc.id.clone()).collect();
        assert_eq!(ids.len(), 60);
        for ex in &c.train {
            ex.validate().unwrap();
            let p = &ex.pqc.passage.true_ids;
            let facts: Vec<(usize, usize)> = p.chunks(2).map(|kv| (kv[0], kv[1])).collect();
            let key = ex.pqc.question.true_ids[1];
            let want = facts.iter().find(|(k, _)| *k == key).unwrap().1;
            let matching: Vec<usize> = (0..4).filter(|&n| ex.pqc.choices[n].true_ids == [want]).collect();
            assert_eq!(matching, vec![ex.answer]);
            for (n, ch) in ex.pqc.choices.iter().enumerate() {
                let v = ch.true_ids[0];
                assert!(vocab.values.contains(&v));
                if n != ex.answer {
                    assert!(!facts.iter().any(|(k, val)| *k == key && *val == v));
                }
            }
        }
    }

    #[test]
    fn nearest_prototype_recovers_true_tokens() {
        let c = generate(&small(0.5)).unwrap();
        let vocab = c.vocabulary().unwrap();
        let (mut hit, mut total) = (0, 0);
        for ex in &c.train {
            for f in all_fields(ex) {
                for (t, fr) in f.true_ids.iter().zip(&f.frames) {
                    let mean = fr.mean_frame();
                    let best = (FIRST_CONTENT..vocab.size)
                        .min_by(|&a, &b| {
                            let d = |id: usize| -> f64 {
                                vocab.proto.row(id).iter().zip(&mean).map(|(p, m)| (p - m) * (p - m)).sum()
                            };
                            d(a).total_cmp(&d(b))
                        })
                        .unwrap();
                    hit += usize::from(best == *t);
                    total += 1;
                }
            }
        }
        assert!(hit as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate(&small(0.2)).unwrap();
        let b = generate(&small(0.2)).unwrap();
        assert_eq!(a, b);
        a.save(dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded, a);
        let again = tempfile::tempdir().unwrap();
        loaded.save(again.path()).unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn malformed_lines_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(0.2)).unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&path, &c.dev[..3]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        match load_jsonl(&path, &LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        let mut rec = ExemplarRecord::from(&c.dev[0]);
        rec.frames_q[1][0].pop();
        let err = rec.into_exemplar(&LoadOptions { d_a: Some(8), vocab_size: None }).unwrap_err().to_string();
        assert!(err.contains("dev-00000") && err.contains("question token 1"), "{err}");

        let mut rec = ExemplarRecord::from(&c.dev[0]);
        rec.p_asr[0] = 999;
        let err = rec.into_exemplar(&LoadOptions { d_a: Some(8), vocab_size: Some(256) }).unwrap_err();
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn rejects_inconsistent_pools() {
        let cfg = GenConfig { value_pool: 3, ..GenConfig::default() };
        assert!(generate(&cfg).is_err());
        let cfg = GenConfig { key_pool: 200, ..GenConfig::default() };
        assert!(generate(&cfg).is_err());
        let cfg = GenConfig { rho: 1.5, ..GenConfig::default() };
        assert!(generate(&cfg).is_err());
    }
}
