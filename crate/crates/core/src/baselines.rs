//! Non-neural choice baselines and the accuracy evaluator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcqa::{argmax, Exemplar, Pqc, Transcript, NUM_CHOICES};
use crate::numerics::Tensor;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    Longest,
    Shortest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    Passage,
    Question,
}

/// Picks the longest (or shortest) choice by token count; ties go to the
/// lowest index.
pub fn choice_length(pqc: &Pqc, mode: LengthMode, transcript: Transcript) -> usize {
    let mut best = 0;
    for (i, c) in pqc.choices.iter().enumerate() {
        let (n, b) = (c.ids(transcript).len(), pqc.choices[best].ids(transcript).len());
        let better = match mode {
            LengthMode::Longest => n > b,
            LengthMode::Shortest => n < b,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Word-vector table for the similarity baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLookup {
    table: Tensor,
}

impl EmbeddingLookup {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::shape("embedding lookup", format!("expected a matrix, got {:?}", table.shape())));
        }
        Ok(EmbeddingLookup { table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Mean of the token vectors; `None` for an empty text.
    pub fn average(&self, ids: &[usize]) -> Result<Option<Vec<f64>>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let mut acc = vec![0.0; self.dim()];
        for &t in ids {
            if t >= self.vocab_size() {
                return Err(Error::InvalidInput(format!(
                    "token {t} has no embedding row (table has {})",
                    self.vocab_size()
                )));
            }
            for (a, v) in acc.iter_mut().zip(self.table.row(t)) {
                *a += v;
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Some(acc))
    }
}

/// Cosine similarity; `-1` when either side is missing or has zero norm.
pub fn cosine(a: Option<&[f64]>, b: Option<&[f64]>) -> f64 {
    let (Some(a), Some(b)) = (a, b) else {
        return -1.0;
    };
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot / (na * nb)
}

/// Picks the choice whose averaged embedding has the largest cosine
/// similarity with the averaged passage (or question).
pub fn choice_similarity(pqc: &Pqc, mode: SimilarityMode, emb: &EmbeddingLookup, transcript: Transcript) -> Result<usize> {
    let reference = match mode {
        SimilarityMode::Passage => &pqc.passage,
        SimilarityMode::Question => &pqc.question,
    };
    let r = emb.average(reference.ids(transcript))?;
    let mut scores = Vec::with_capacity(pqc.choices.len());
    for c in &pqc.choices {
        let v = emb.average(c.ids(transcript))?;
        scores.push(cosine(r.as_deref(), v.as_deref()));
    }
    Ok(argmax(&scores))
}

/// Uniform random choice per exemplar, drawn from `stream.index(i)`.
pub fn random_predictions(n: usize, stream: Stream) -> Vec<usize> {
    (0..n).map(|i| stream.index(i as u64).rng().random_range(0..NUM_CHOICES)).collect()
}

/// Exact-match fraction.
pub fn accuracy(predictions: &[usize], answers: &[usize]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} answers",
            predictions.len(),
            answers.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty prediction set".into()));
    }
    let hits = predictions.iter().zip(answers).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Predictions over a split together with their accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Runs `predict` on every instance, then reads labels through `label`.
/// No label is read before the last prediction is fixed.
pub fn evaluate_with<'a, P, L>(exemplars: &'a [Exemplar], mut predict: P, mut label: L) -> Result<Evaluation>
where
    P: FnMut(&'a Pqc) -> Result<usize>,
    L: FnMut(&'a Exemplar) -> usize,
{
    let predictions = exemplars.iter().map(|e| predict(&e.pqc)).collect::<Result<Vec<_>>>()?;
    let answers: Vec<usize> = exemplars.iter().map(&mut label).collect();
    let accuracy = accuracy(&predictions, &answers)?;
    Ok(Evaluation {
        predictions,
        accuracy,
    })
}

pub fn evaluate<'a, P>(exemplars: &'a [Exemplar], predict: P) -> Result<Evaluation>
where
    P: FnMut(&'a Pqc) -> Result<usize>,
{
    evaluate_with(exemplars, predict, |e| e.answer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcqa::tests::toy_pqc;

    fn lengths(ls: &[usize]) -> Pqc {
        let choices: Vec<Vec<usize>> = ls.iter().map(|&n| vec![7; n]).collect();
        let refs: Vec<&[usize]> = choices.iter().map(Vec::as_slice).collect();
        toy_pqc(&[5], &[6], &refs, 2, 0)
    }

    #[test]
    fn length_examples() {
        let p = lengths(&[3, 5, 2, 4]);
        assert_eq!(choice_length(&p, LengthMode::Longest, Transcript::Asr), 1);
        assert_eq!(choice_length(&p, LengthMode::Shortest, Transcript::Asr), 2);
        assert_eq!(choice_length(&lengths(&[5, 5, 1, 5]), LengthMode::Longest, Transcript::Asr), 0);
    }

    fn emb2() -> EmbeddingLookup {
        // ids 5..9 carry (1,0),(0,1),(-1,0),(0,-1); id 9 is the zero vector.
        let mut rows = vec![vec![0.0, 0.0]; 5];
        rows.extend([vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0], vec![0.0, 0.0]]);
        EmbeddingLookup::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let e = emb2();
        let p = toy_pqc(&[6], &[5], &[&[5], &[6], &[7], &[8]], 2, 0);
        assert_eq!(choice_similarity(&p, SimilarityMode::Question, &e, Transcript::Asr).unwrap(), 0);
        assert_eq!(choice_similarity(&p, SimilarityMode::Passage, &e, Transcript::Asr).unwrap(), 1);
        let same = toy_pqc(&[6], &[5], &[&[6], &[6], &[6], &[6]], 2, 0);
        assert_eq!(choice_similarity(&same, SimilarityMode::Question, &e, Transcript::Asr).unwrap(), 0);
        // zero-norm choices rank last
        let z = toy_pqc(&[6], &[5], &[&[9], &[8], &[9], &[9]], 2, 0);
        assert_eq!(choice_similarity(&z, SimilarityMode::Question, &e, Transcript::Asr).unwrap(), 1);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn labels_are_read_after_all_predictions() {
        use std::cell::Cell;
        let exs: Vec<Exemplar> = (0..5)
            .map(|i| Exemplar {
                pqc: toy_pqc(&[5], &[6], &[&[7], &[8], &[9], &[10]], 2, i),
                answer: (i % 4) as usize,
            })
            .collect();
        let predicted = Cell::new(0);
        let labels_read = Cell::new(0);
        let ev = evaluate_with(
            &exs,
            |_| {
                assert_eq!(labels_read.get(), 0, "label read before prediction");
                predicted.set(predicted.get() + 1);
                Ok(1)
            },
            |e| {
                assert_eq!(predicted.get(), exs.len());
                labels_read.set(labels_read.get() + 1);
                e.answer
            },
        )
        .unwrap();
        assert_eq!(ev.accuracy, 0.2);
    }

    #[test]
    fn random_baseline_concentrates() {
        let n = 10_000;
        let preds = random_predictions(n, Stream::new(5));
        let answers: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % 4).collect();
        let acc = accuracy(&preds, &answers).unwrap();
        assert!((acc - 0.25).abs() < 0.02, "{acc}");
    }
}
