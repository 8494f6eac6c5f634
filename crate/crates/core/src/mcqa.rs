//! Multiple-choice scoring: per-choice input assembly, relevance scores,
//! the softmax over choices, the training loss and the argmax rule.

use serde::{Deserialize, Serialize};

use crate::encoder::{embed_input, encode, relevance, BoundModel, ModelParams, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Graph, Var};
use crate::tsaatt::{encode_tokens, AcousticFrames, TsaattVars};

/// Number of candidate choices per exemplar.
pub const NUM_CHOICES: usize = 4;

/// One spoken text span: reference tokens, recognizer output and one frame
/// matrix per token. The recognizer output has the same length as the
/// reference (substitution errors only) and frames align with both.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub true_ids: Vec<usize>,
    pub asr_ids: Vec<usize>,
    pub frames: Vec<AcousticFrames>,
}

impl Field {
    pub fn len(&self) -> usize {
        self.true_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_ids.is_empty()
    }

    pub fn ids(&self, transcript: Transcript) -> &[usize] {
        match transcript {
            Transcript::Asr => &self.asr_ids,
            Transcript::Clean => &self.true_ids,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.asr_ids.len() != self.true_ids.len() || self.frames.len() != self.true_ids.len() {
            return Err(Error::Format(format!(
                "{what}: {} reference tokens, {} transcribed tokens, {} frame matrices",
                self.true_ids.len(),
                self.asr_ids.len(),
                self.frames.len()
            )));
        }
        if let Some(i) = self.frames.iter().position(AcousticFrames::is_special) {
            return Err(Error::Format(format!("{what}: token {i} has no frames")));
        }
        Ok(())
    }
}

/// Passage, question and choices without the answer label. Everything a
/// predictor is allowed to look at.
#[derive(Clone, Debug, PartialEq)]
pub struct Pqc {
    pub id: String,
    pub passage: Field,
    pub question: Field,
    pub choices: Vec<Field>,
}

/// A labelled passage-question-choices instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub pqc: Pqc,
    pub answer: usize,
}

impl Exemplar {
    pub fn validate(&self) -> Result<()> {
        let p = &self.pqc;
        if p.choices.len() != NUM_CHOICES {
            return Err(Error::Format(format!("{}: {} choices, expected {NUM_CHOICES}", p.id, p.choices.len())));
        }
        if self.answer >= p.choices.len() {
            return Err(Error::Format(format!("{}: answer index {} out of range", p.id, self.answer)));
        }
        p.passage.validate(&format!("{} passage", p.id))?;
        p.question.validate(&format!("{} question", p.id))?;
        for (n, c) in p.choices.iter().enumerate() {
            c.validate(&format!("{} choice {n}", p.id))?;
        }
        Ok(())
    }
}

/// Which token sequence the text channel reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transcript {
    /// Recognizer output (with substitution errors).
    Asr,
    /// Reference transcription.
    Clean,
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transcript::Asr => "asr",
            Transcript::Clean => "clean",
        })
    }
}

impl std::str::FromStr for Transcript {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Transcript::Asr),
            "clean" => Ok(Transcript::Clean),
            other => Err(Error::InvalidInput(format!("unknown transcript condition {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub transcript: Transcript,
    /// When false every acoustic vector is zero (text-only model).
    pub acoustics: bool,
}

impl ForwardOptions {
    pub fn text_only(transcript: Transcript) -> Self {
        ForwardOptions {
            transcript,
            acoustics: false,
        }
    }

    pub fn audio_enriched(transcript: Transcript) -> Self {
        ForwardOptions {
            transcript,
            acoustics: true,
        }
    }
}

/// Origin of each position in an assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Cls,
    Sep,
    Pad,
    Question(usize),
    Choice(usize),
    Passage(usize),
}

/// `[CLS] q c_n [SEP] p [SEP]` with segment 0 up to and including the
/// first `[SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub slots: Vec<Slot>,
    pub choice: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Appends `[PAD]` positions (masked out) up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD);
            self.segment_ids.push(1);
            self.attention_mask.push(false);
            self.slots.push(Slot::Pad);
        }
    }
}

/// Builds the input sequence for choice `n`, truncating the passage from
/// its tail so the sequence fits in `max_len`.
pub fn assemble(pqc: &Pqc, n: usize, transcript: Transcript, max_len: usize) -> Result<AssembledInput> {
    let choice = pqc
        .choices
        .get(n)
        .ok_or_else(|| Error::InvalidInput(format!("{}: no choice {n}", pqc.id)))?;
    let (q, c, p) = (
        pqc.question.ids(transcript),
        choice.ids(transcript),
        pqc.passage.ids(transcript),
    );
    let overhead = q.len() + c.len() + 3;
    if overhead > max_len {
        return Err(Error::InvalidInput(format!(
            "{}: question and choice {n} need {overhead} positions, max length is {max_len}",
            pqc.id
        )));
    }
    let keep = p.len().min(max_len - overhead);
    let total = overhead + keep;
    let mut out = AssembledInput {
        token_ids: Vec::with_capacity(total),
        segment_ids: Vec::with_capacity(total),
        attention_mask: vec![true; total],
        slots: Vec::with_capacity(total),
        choice: n,
    };
    let mut push = |id: usize, seg: usize, slot: Slot| {
        out.token_ids.push(id);
        out.segment_ids.push(seg);
        out.slots.push(slot);
    };
    push(CLS, 0, Slot::Cls);
    for (i, &t) in q.iter().enumerate() {
        push(t, 0, Slot::Question(i));
    }
    for (i, &t) in c.iter().enumerate() {
        push(t, 0, Slot::Choice(i));
    }
    push(SEP, 0, Slot::Sep);
    for (i, &t) in p[..keep].iter().enumerate() {
        push(t, 1, Slot::Passage(i));
    }
    push(SEP, 1, Slot::Sep);
    Ok(out)
}

/// Acoustic embeddings of every token of one instance, computed once and
/// shared by the per-choice sequences. Rows are ordered question, passage,
/// then each choice.
struct AcousticTable {
    rows: Var,
    passage_offset: usize,
    choice_offsets: Vec<usize>,
}

impl AcousticTable {
    fn build(g: &mut Graph, vars: &TsaattVars, pqc: &Pqc) -> Result<Self> {
        let mut frames: Vec<&AcousticFrames> = pqc.question.frames.iter().collect();
        let passage_offset = frames.len();
        frames.extend(pqc.passage.frames.iter());
        let mut choice_offsets = Vec::with_capacity(pqc.choices.len());
        for c in &pqc.choices {
            choice_offsets.push(frames.len());
            frames.extend(c.frames.iter());
        }
        let rows = encode_tokens(g, vars, &frames)?;
        Ok(AcousticTable {
            rows,
            passage_offset,
            choice_offsets,
        })
    }

    fn row_index(&self, slot: Slot, choice: usize) -> Option<usize> {
        match slot {
            Slot::Cls | Slot::Sep | Slot::Pad => None,
            Slot::Question(i) => Some(i),
            Slot::Passage(i) => Some(self.passage_offset + i),
            Slot::Choice(i) => Some(self.choice_offsets[choice] + i),
        }
    }

    /// `seq × d_t` acoustic matrix for one assembled sequence, zero at
    /// special and padding positions.
    fn place(&self, g: &mut Graph, input: &AssembledInput) -> Result<Var> {
        let index: Vec<Option<usize>> = input.slots.iter().map(|s| self.row_index(*s, input.choice)).collect();
        g.gather_rows(self.rows, &index)
    }
}

/// Relevance scores of all choices as a `1 × N` row.
pub fn choice_scores(g: &mut Graph, m: &BoundModel, pqc: &Pqc, opts: ForwardOptions) -> Result<Var> {
    let table = if opts.acoustics {
        let vars = TsaattVars::from_bound(&m.layout.tsaatt, &m.bound);
        Some(AcousticTable::build(g, &vars, pqc)?)
    } else {
        None
    };
    let max_len = m.layout.config.max_len;
    let mut scores = Vec::with_capacity(pqc.choices.len());
    for n in 0..pqc.choices.len() {
        let input = assemble(pqc, n, opts.transcript, max_len)?;
        scores.push(score_assembled(g, m, &input, table.as_ref())?);
    }
    g.concat_cols(&scores)
}

fn score_assembled(g: &mut Graph, m: &BoundModel, input: &AssembledInput, table: Option<&AcousticTable>) -> Result<Var> {
    let acoustic = table.map(|t| t.place(g, input)).transpose()?;
    let positions: Vec<usize> = (0..input.len()).collect();
    let x = embed_input(g, m, &input.token_ids, &input.segment_ids, &positions, acoustic)?;
    let out = encode(g, m, x, &input.attention_mask)?;
    let cls = out.cls(g)?;
    relevance(g, m, cls)
}

/// Relevance score of one assembled sequence. Acoustic vectors come from
/// `pqc`'s frames when `acoustics` is set.
pub fn score(params: &ModelParams, pqc: &Pqc, input: &AssembledInput, acoustics: bool) -> Result<f64> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, |_| false);
    let table = if acoustics {
        let vars = TsaattVars::from_bound(&m.layout.tsaatt, &m.bound);
        Some(AcousticTable::build(&mut g, &vars, pqc)?)
    } else {
        None
    };
    let r = score_assembled(&mut g, &m, input, table.as_ref())?;
    Ok(g.value(r).item())
}

/// Cross-entropy of the choice distribution against the labelled answer.
pub fn task_loss(g: &mut Graph, m: &BoundModel, ex: &Exemplar, opts: ForwardOptions) -> Result<Var> {
    let scores = choice_scores(g, m, &ex.pqc, opts)?;
    let loss = g.cross_entropy(scores, &[ex.answer])?;
    g.check_finite(loss, "task loss")?;
    Ok(loss)
}

/// `P(c_n) = exp(r_n) / Σ exp(r_n')`.
pub fn choice_distribution(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    softmax_rows(scores, scores.len())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

impl ModelParams {
    /// Relevance scores of every choice on an evaluation graph.
    pub fn scores(&self, pqc: &Pqc, opts: ForwardOptions) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, |_| false);
        let s = choice_scores(&mut g, &m, pqc, opts)?;
        Ok(g.value(s).data().to_vec())
    }

    /// The choice with the largest raw relevance score.
    pub fn predict(&self, pqc: &Pqc, opts: ForwardOptions) -> Result<usize> {
        Ok(argmax(&self.scores(pqc, opts)?))
    }

    pub fn task_loss(&self, ex: &Exemplar, opts: ForwardOptions) -> Result<f64> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, |_| false);
        let l = task_loss(&mut g, &m, ex, opts)?;
        Ok(g.value(l).item())
    }
}
