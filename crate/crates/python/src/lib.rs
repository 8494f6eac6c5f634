//! Python bindings. Structured values (configs, manifests, exemplars,
//! metrics, reports) cross the boundary as plain dicts and lists via JSON.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::create_exception;
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use aeqa::baselines::{
    choice_length, choice_similarity, evaluate, random_predictions, EmbeddingLookup, LengthMode,
    SimilarityMode,
};
use aeqa::data::{Corpus, ExemplarRecord, GenConfig};
use aeqa::encoder::EncoderConfig;
use aeqa::experiment::{run_experiment as run_all, ExperimentConfig};
use aeqa::mcqa::{choice_distribution as distribution, Exemplar, Transcript};
use aeqa::rng::Stream;
use aeqa::training::{
    accuracy_of, load_checkpoint, run_stage, save_checkpoint, Stage, StageData, TrainPlan,
    TrainState,
};
use aeqa::tsaatt::{AcousticFrames, TsaattParams};
use aeqa::verify::{gradcheck_suite, suite_config};

create_exception!(aeqa_py, StageOrderError, PyValueError);

fn to_py_err(e: aeqa::Error) -> PyErr {
    match e {
        aeqa::Error::StageOrder(_) => StageOrderError::new_err(e.to_string()),
        aeqa::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        aeqa::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: FromStr<Err = aeqa::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_py_or_default<T: DeserializeOwned + Default>(
    obj: Option<&Bound<'_, PyAny>>,
) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

/// Generated or loaded train/dev/test splits.
#[pyclass(name = "Corpus", module = "aeqa_py")]
pub struct PyCorpus {
    pub inner: Corpus,
}

impl PyCorpus {
    fn split(&self, split: &str) -> PyResult<&[Exemplar]> {
        self.inner.split(split).map_err(to_py_err)
    }
}

#[pymethods]
impl PyCorpus {
    /// Generates a corpus; `config` holds any generator fields to override
    /// (`n_train`, `rho`, `seed`, ...).
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let gen: GenConfig = from_py_or_default(config)?;
        Ok(PyCorpus {
            inner: aeqa::data::generate(&gen).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: Corpus::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }

    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// One exemplar in the dataset record layout.
    fn exemplar<'py>(
        &self,
        py: Python<'py>,
        split: &str,
        index: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let exs = self.split(split)?;
        let ex = exs
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("{split} has {} exemplars", exs.len())))?;
        to_py(py, &ExemplarRecord::from(ex))
    }

    fn answers(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.split(split)?.iter().map(|e| e.answer).collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.manifest.counts;
        format!(
            "Corpus(train={}, dev={}, test={}, rho={})",
            c.train, c.dev, c.test, self.inner.manifest.gen.rho
        )
    }
}

/// Acoustic attention pooling for one token's frames.
#[pyclass(name = "Tsaatt", module = "aeqa_py")]
pub struct PyTsaatt {
    pub inner: TsaattParams,
}

fn frames(d_a: usize, rows: Vec<Vec<f64>>) -> PyResult<AcousticFrames> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("a token needs at least one frame"));
    }
    AcousticFrames::from_rows(d_a, &rows).map_err(to_py_err)
}

#[pymethods]
impl PyTsaatt {
    #[new]
    #[pyo3(signature = (d_a, d_t, seed=0))]
    fn new(d_a: usize, d_t: usize, seed: u64) -> Self {
        PyTsaatt {
            inner: TsaattParams::init(d_a, d_t, Stream::new(seed)),
        }
    }

    /// Attention map, `d_a` rows each a distribution over the frames.
    fn attend(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = frames(self.inner.acoustic_dim(), rows)?;
        let a = self.inner.attend(&f).map_err(to_py_err)?;
        Ok((0..a.rows()).map(|i| a.row(i).to_vec()).collect())
    }

    /// Pooled `d_a` vector.
    fn pool(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let f = frames(self.inner.acoustic_dim(), rows)?;
        let a = self.inner.attend(&f).map_err(to_py_err)?;
        Ok(self.inner.pool(&f, &a).map_err(to_py_err)?.data().to_vec())
    }

    /// Acoustic embedding in the encoder's hidden size.
    fn encode(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let f = frames(self.inner.acoustic_dim(), rows)?;
        Ok(self
            .inner
            .encode_token(&f)
            .map_err(to_py_err)?
            .data()
            .to_vec())
    }
}

/// Encoder, scoring head and acoustic block with their training progress.
#[pyclass(name = "Model", module = "aeqa_py")]
pub struct PyModel {
    pub state: TrainState,
}

impl PyModel {
    fn transcript(&self, transcript: Option<&str>) -> PyResult<Transcript> {
        transcript.map_or(Ok(self.state.transcript), parse)
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` overrides encoder fields (`d_model`, ...).
    #[new]
    #[pyo3(signature = (variant="aebert", transcript="asr", seed=0, config=None))]
    fn new(
        variant: &str,
        transcript: &str,
        seed: u64,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let cfg: EncoderConfig = from_py_or_default(config)?;
        Ok(PyModel {
            state: TrainState::new(&cfg, parse(variant)?, parse(transcript)?, seed)
                .map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            state: load_checkpoint(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.state).map_err(to_py_err)
    }

    #[getter]
    fn completed(&self) -> Vec<String> {
        self.state.completed.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn variant(&self) -> String {
        self.state.variant.to_string()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.state.params.config())
    }

    /// Runs the given stages in order and returns the metric records.
    /// `plan` overrides fields of the default schedule.
    #[pyo3(signature = (corpus, stages, plan=None, seed=0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &PyCorpus,
        stages: Vec<String>,
        plan: Option<&Bound<'py, PyAny>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let plan: TrainPlan = from_py_or_default(plan)?;
        let stages: Vec<Stage> = stages.iter().map(|s| parse(s)).collect::<PyResult<_>>()?;
        let data = StageData {
            train: &corpus.inner.train,
            dev: &corpus.inner.dev,
        };
        let mut log = Vec::new();
        for st in stages {
            log.extend(run_stage(&mut self.state, st, &data, &plan, seed).map_err(to_py_err)?);
        }
        to_py(py, &log)
    }

    /// Raw relevance score of every choice of one exemplar.
    #[pyo3(signature = (corpus, split, index, transcript=None))]
    fn scores(
        &self,
        corpus: &PyCorpus,
        split: &str,
        index: usize,
        transcript: Option<&str>,
    ) -> PyResult<Vec<f64>> {
        let exs = corpus.split(split)?;
        let ex = exs
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("{split} has {} exemplars", exs.len())))?;
        let opts = self.state.eval_options(self.transcript(transcript)?);
        self.state.params.scores(&ex.pqc, opts).map_err(to_py_err)
    }

    #[pyo3(signature = (corpus, split, transcript=None))]
    fn accuracy(&self, corpus: &PyCorpus, split: &str, transcript: Option<&str>) -> PyResult<f64> {
        let opts = self.state.eval_options(self.transcript(transcript)?);
        accuracy_of(&self.state.params, corpus.split(split)?, opts).map_err(to_py_err)
    }
}

/// `softmax` of relevance scores over the choices.
#[pyfunction]
fn choice_distribution(scores: Vec<f64>) -> Vec<f64> {
    distribution(&scores)
}

/// Accuracy of a non-neural baseline: `choice_length_longest`,
/// `choice_length_shortest`, `choice_similarity_passage`,
/// `choice_similarity_question` (word vectors from `model`) or `random`.
#[pyfunction]
#[pyo3(signature = (corpus, split, name, transcript="asr", seed=0, model=None))]
fn baseline_accuracy(
    corpus: &PyCorpus,
    split: &str,
    name: &str,
    transcript: &str,
    seed: u64,
    model: Option<&PyModel>,
) -> PyResult<f64> {
    let t: Transcript = parse(transcript)?;
    let exs = corpus.split(split)?;
    let similarity = |mode| -> PyResult<f64> {
        let m = model.ok_or_else(|| {
            PyValueError::new_err(format!("{name} needs a model for word vectors"))
        })?;
        let p = &m.state.params;
        let emb =
            EmbeddingLookup::new(p.store.value(p.layout.emb.token).clone()).map_err(to_py_err)?;
        Ok(evaluate(exs, |q| choice_similarity(q, mode, &emb, t))
            .map_err(to_py_err)?
            .accuracy)
    };
    let length = |mode| -> PyResult<f64> {
        Ok(evaluate(exs, |q| Ok(choice_length(q, mode, t)))
            .map_err(to_py_err)?
            .accuracy)
    };
    match name {
        "choice_length_longest" => length(LengthMode::Longest),
        "choice_length_shortest" => length(LengthMode::Shortest),
        "choice_similarity_passage" => similarity(SimilarityMode::Passage),
        "choice_similarity_question" => similarity(SimilarityMode::Question),
        "random" => {
            let mut preds =
                random_predictions(exs.len(), Stream::new(seed).derive("random").derive(split))
                    .into_iter();
            Ok(evaluate(exs, |_| Ok(preds.next().unwrap_or(0)))
                .map_err(to_py_err)?
                .accuracy)
        }
        other => Err(PyValueError::new_err(format!("unknown baseline {other:?}"))),
    }
}

/// Trains and scores every system and returns the results report; with
/// `out`, metrics, checkpoints and tables are written there. `config`
/// replaces any of `encoder`, `plan`, `seed` and `clean_reference`.
#[pyfunction]
#[pyo3(signature = (corpus, out=None, config=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    out: Option<PathBuf>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(c) => {
            let merged = py.import("json")?.call_method1(
                "loads",
                (serde_json::to_string(&ExperimentConfig::new(
                    EncoderConfig::default(),
                    TrainPlan::desk(),
                    0,
                ))
                .map_err(|e| PyValueError::new_err(e.to_string()))?,),
            )?;
            merged.call_method1("update", (c,))?;
            from_py(&merged)?
        }
        None => ExperimentConfig::new(EncoderConfig::default(), TrainPlan::desk(), 0),
    };
    let report = run_all(&corpus.inner, &cfg, out.as_deref()).map_err(to_py_err)?;
    to_py(py, &report)
}

/// Gradient check of every op and the composite losses on the tiny config.
#[pyfunction]
fn gradcheck<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    let report = gradcheck_suite(&suite_config(), None).map_err(to_py_err)?;
    to_py(py, &report)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTsaatt>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(choice_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("StageOrderError", m.py().get_type::<StageOrderError>())?;
    Ok(())
}

#[pymodule]
fn aeqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
