//! Miniature BERT-style encoder with a four-way input embedding sum
//! (token + position + segment + acoustic), post-norm transformer blocks,
//! a masked-LM head, and the scalar relevance head used for choice scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Stream;
use crate::tsaatt::TsaattIds;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// First non-special token id.
pub const FIRST_CONTENT: usize = 5;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden size `d_t`.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Frame feature dimension `d_a` of the acoustic channel.
    pub acoustic_dim: usize,
    pub dropout: f64,
    /// Standard deviation of the normal init for embeddings and weights.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            d_ff: 256,
            max_len: 128,
            vocab_size: 256,
            acoustic_dim: 43,
            dropout: 0.1,
            init_std: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 1,
            d_ff: 16,
            max_len: 16,
            vocab_size: 16,
            acoustic_dim: 4,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("encoder config: {m}")));
        if self.d_model < 2 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads must divide d_model (>= 2)");
        }
        if self.d_ff == 0 || self.max_len < 3 || self.acoustic_dim == 0 {
            return bad("d_ff, acoustic_dim must be positive and max_len >= 3");
        }
        if self.vocab_size <= FIRST_CONTENT {
            return bad("vocabulary must contain content tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlmHeadIds {
    pub dense: ParamId,
    pub dense_bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub out_bias: ParamId,
}

/// `W_r` (`1 × d_t`) and `b_r` of the relevance score.
#[derive(Clone, Copy, Debug)]
pub struct ScoreHeadIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    MlmHead,
    ScoreHead,
    Acoustic,
}

/// Where each weight lives inside the store.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub config: EncoderConfig,
    pub emb: EmbeddingIds,
    pub layers: Vec<LayerIds>,
    pub mlm: MlmHeadIds,
    pub head: ScoreHeadIds,
    pub tsaatt: TsaattIds,
}

/// All weights of the audio-enriched model in one store. The store order is
/// fixed by the config, which makes checkpoints positional.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub layout: ModelLayout,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, stream: Stream) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut store = ParamStore::new();
        let mut rng = stream.derive("encoder").rng();
        let std = config.init_std;
        let normal = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| Tensor::randn(shape, std, rng);

        let emb = EmbeddingIds {
            token: store.add("emb.token", normal(&[config.vocab_size, d], &mut rng), false),
            position: store.add("emb.position", normal(&[config.max_len, d], &mut rng), false),
            segment: store.add("emb.segment", normal(&[2, d], &mut rng), false),
            ln_gain: store.add("emb.ln.gain", Tensor::full(&[d], 1.0), false),
            ln_bias: store.add("emb.ln.bias", Tensor::zeros(&[d]), false),
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut w = |name: &str, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
                store.add(format!("layer.{l}.{name}"), normal(shape, rng), true)
            };
            let wq = w("attn.wq", &[d, d], &mut rng);
            let wk = w("attn.wk", &[d, d], &mut rng);
            let wv = w("attn.wv", &[d, d], &mut rng);
            let wo = w("attn.wo", &[d, d], &mut rng);
            let w1 = w("ffn.w1", &[d, f], &mut rng);
            let w2 = w("ffn.w2", &[f, d], &mut rng);
            let mut z = |name: &str, n: usize| store.add(format!("layer.{l}.{name}"), Tensor::zeros(&[n]), false);
            let (bq, bk, bv, bo) = (z("attn.bq", d), z("attn.bk", d), z("attn.bv", d), z("attn.bo", d));
            let (b1, b2) = (z("ffn.b1", f), z("ffn.b2", d));
            let (ln1_bias, ln2_bias) = (z("ln1.bias", d), z("ln2.bias", d));
            let ln1_gain = store.add(format!("layer.{l}.ln1.gain"), Tensor::full(&[d], 1.0), false);
            let ln2_gain = store.add(format!("layer.{l}.ln2.gain"), Tensor::full(&[d], 1.0), false);
            layers.push(LayerIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gain,
                ln1_bias,
                w1,
                b1,
                w2,
                b2,
                ln2_gain,
                ln2_bias,
            });
        }
        let mlm = MlmHeadIds {
            dense: store.add("mlm.dense", normal(&[d, d], &mut rng), true),
            dense_bias: store.add("mlm.dense_bias", Tensor::zeros(&[d]), false),
            ln_gain: store.add("mlm.ln.gain", Tensor::full(&[d], 1.0), false),
            ln_bias: store.add("mlm.ln.bias", Tensor::zeros(&[d]), false),
            out_bias: store.add("mlm.out_bias", Tensor::zeros(&[config.vocab_size]), false),
        };
        let head = ScoreHeadIds {
            weight: store.add("head.weight", normal(&[1, d], &mut rng), true),
            bias: store.add("head.bias", Tensor::zeros(&[1]), false),
        };
        let tsaatt = TsaattIds::register(&mut store, config.acoustic_dim, d, stream);
        Ok(ModelParams {
            layout: ModelLayout {
                config: config.clone(),
                emb,
                layers,
                mlm,
                head,
                tsaatt,
            },
            store,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.layout.config
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamId) -> bool) -> BoundModel<'_> {
        BoundModel {
            layout: &self.layout,
            bound: self.store.bind(g, trainable),
        }
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        let name = self.store.name(id);
        if name.starts_with("emb.") {
            ParamGroup::Embeddings
        } else if name.starts_with("layer.") {
            ParamGroup::Encoder
        } else if name.starts_with("mlm.") {
            ParamGroup::MlmHead
        } else if name.starts_with("head.") {
            ParamGroup::ScoreHead
        } else {
            ParamGroup::Acoustic
        }
    }
}

/// Graph-side view of the model: the bound leaves plus the id layout.
pub struct BoundModel<'a> {
    pub layout: &'a ModelLayout,
    pub bound: Bound,
}

impl BoundModel<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Per-position input embedding: `E_tok[id] + E_pos[pos] + E_seg[seg] + v̂`,
/// then layer-norm, then dropout (training graphs only). `acoustic`, when
/// present, is a `seq × d_t` matrix of acoustic embeddings; `None` is the
/// text-only case.
pub fn embed_input(
    g: &mut Graph,
    m: &BoundModel,
    token_ids: &[usize],
    segment_ids: &[usize],
    positions: &[usize],
    acoustic: Option<Var>,
) -> Result<Var> {
    let cfg = &m.layout.config;
    let n = token_ids.len();
    if n == 0 || segment_ids.len() != n || positions.len() != n {
        return Err(Error::InvalidInput(format!(
            "embed_input: {} tokens, {} segments, {} positions",
            n,
            segment_ids.len(),
            positions.len()
        )));
    }
    if let Some(id) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(s) = segment_ids.iter().find(|&&s| s > 1) {
        return Err(Error::InvalidInput(format!("segment id {s} not in {{0, 1}}")));
    }
    if let Some(p) = positions.iter().find(|&&p| p >= cfg.max_len) {
        return Err(Error::InvalidInput(format!("position {p} beyond max length {}", cfg.max_len)));
    }
    let some = |v: &[usize]| v.iter().map(|&i| Some(i)).collect::<Vec<_>>();
    let e = &m.layout.emb;
    let tok = g.gather_rows(m.var(e.token), &some(token_ids))?;
    let pos = g.gather_rows(m.var(e.position), &some(positions))?;
    let seg = g.gather_rows(m.var(e.segment), &some(segment_ids))?;
    let mut sum = g.add(tok, pos)?;
    sum = g.add(sum, seg)?;
    if let Some(a) = acoustic {
        sum = g.add(sum, a)?;
    }
    let normed = g.layer_norm(sum, m.var(e.ln_gain), m.var(e.ln_bias), LN_EPS)?;
    Ok(g.dropout(normed))
}

pub struct EncoderOutput {
    /// `seq × d_t` final hidden states.
    pub hidden: Var,
    /// Attention probabilities per layer and head (`seq × seq` each).
    pub attention: Vec<Vec<Var>>,
}

impl EncoderOutput {
    /// Hidden state at position 0, the `[CLS]` slot (`1 × d_t`).
    pub fn cls(&self, g: &mut Graph) -> Result<Var> {
        g.slice_rows(self.hidden, 0, 1)
    }
}

/// Large negative logit that underflows to an exact zero after the softmax
/// max shift.
const MASKED_LOGIT: f64 = -1e30;

/// Runs the post-norm transformer stack. `mask[j]` is false for padding;
/// padded keys receive exactly zero attention.
pub fn encode(g: &mut Graph, m: &BoundModel, embedded: Var, mask: &[bool]) -> Result<EncoderOutput> {
    let cfg = &m.layout.config;
    let n = g.value(embedded).rows();
    if mask.len() != n {
        return Err(Error::InvalidInput(format!("mask of length {} for {n} positions", mask.len())));
    }
    let mask_bias = if mask.iter().all(|&b| b) {
        None
    } else {
        let row: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { MASKED_LOGIT }).collect();
        let data = row.iter().copied().cycle().take(n * n).collect();
        Some(g.constant(Tensor::matrix(n, n, data)?))
    };
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embedded;
    let mut attention = Vec::with_capacity(cfg.layers);
    for layer in &m.layout.layers {
        let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let y = g.matmul(x, m.var(w))?;
            g.add_row(y, m.var(b))
        };
        let q = lin(g, x, layer.wq, layer.bq)?;
        let k = lin(g, x, layer.wk, layer.bk)?;
        let v = lin(g, x, layer.wv, layer.bv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let raw = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(raw, scale);
            if let Some(mb) = mask_bias {
                scores = g.add(scores, mb)?;
            }
            let p = g.row_softmax(scores);
            probs.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn_out = lin(g, merged, layer.wo, layer.bo)?;
        let attn_out = g.dropout(attn_out);
        let res1 = g.add(x, attn_out)?;
        let h1 = g.layer_norm(res1, m.var(layer.ln1_gain), m.var(layer.ln1_bias), LN_EPS)?;

        let ff = lin(g, h1, layer.w1, layer.b1)?;
        let ff = g.gelu(ff);
        let ff = lin(g, ff, layer.w2, layer.b2)?;
        let ff = g.dropout(ff);
        let res2 = g.add(h1, ff)?;
        x = g.layer_norm(res2, m.var(layer.ln2_gain), m.var(layer.ln2_bias), LN_EPS)?;
        attention.push(probs);
    }
    g.check_finite(x, "encoder output")?;
    Ok(EncoderOutput { hidden: x, attention })
}

/// Relevance score `W_r h + b_r` for a `1 × d_t` hidden row, as `1 × 1`.
pub fn relevance(g: &mut Graph, m: &BoundModel, h_cls: Var) -> Result<Var> {
    let head = &m.layout.head;
    let r = g.matmul_nt(h_cls, m.var(head.weight))?;
    g.add_row(r, m.var(head.bias))
}

/// One masked-LM training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub input_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// `(position, original id)` for every selected position.
    pub targets: Vec<(usize, usize)>,
}

pub const MLM_SELECT_RATE: f64 = 0.15;

/// Selects 15% of content positions (at least one); of those 80% become
/// `[MASK]`, 10% a random content token and 10% stay unchanged.
pub fn mask_for_mlm<R: Rng + ?Sized>(
    ids: &[usize],
    segment_ids: &[usize],
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    let content: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= FIRST_CONTENT).collect();
    if content.is_empty() {
        return Err(Error::InvalidInput("sequence has no content tokens to mask".into()));
    }
    let mut chosen: Vec<usize> = content
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < MLM_SELECT_RATE)
        .collect();
    if chosen.is_empty() {
        chosen.push(content[rng.random_range(0..content.len())]);
    }
    let mut input_ids = ids.to_vec();
    let mut targets = Vec::with_capacity(chosen.len());
    for &pos in &chosen {
        targets.push((pos, ids[pos]));
        let r: f64 = rng.random();
        if r < 0.8 {
            input_ids[pos] = MASK;
        } else if r < 0.9 {
            input_ids[pos] = rng.random_range(FIRST_CONTENT..vocab_size);
        }
    }
    Ok(MaskedSequence {
        input_ids,
        segment_ids: segment_ids.to_vec(),
        targets,
    })
}

/// Masked-LM cross-entropy for one sequence, averaged over its targets.
/// The output projection is tied to the token embedding table. Acoustic
/// inputs are zero throughout.
pub fn mlm_loss(g: &mut Graph, m: &BoundModel, seq: &MaskedSequence) -> Result<Var> {
    let positions: Vec<usize> = (0..seq.input_ids.len()).collect();
    let x = embed_input(g, m, &seq.input_ids, &seq.segment_ids, &positions, None)?;
    let mask = vec![true; seq.input_ids.len()];
    let out = encode(g, m, x, &mask)?;
    let picks: Vec<Option<usize>> = seq.targets.iter().map(|(p, _)| Some(*p)).collect();
    let h = g.gather_rows(out.hidden, &picks)?;
    let head = &m.layout.mlm;
    let h = g.matmul(h, m.var(head.dense))?;
    let h = g.add_row(h, m.var(head.dense_bias))?;
    let h = g.gelu(h);
    let h = g.layer_norm(h, m.var(head.ln_gain), m.var(head.ln_bias), LN_EPS)?;
    let logits = g.matmul_nt(h, m.var(m.layout.emb.token))?;
    let logits = g.add_row(logits, m.var(head.out_bias))?;
    let targets: Vec<usize> = seq.targets.iter().map(|(_, t)| *t).collect();
    g.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::init(&EncoderConfig::tiny(), Stream::new(seed)).unwrap()
    }

    /// Independent sum-then-normalize recomputation of the input embedding.
    fn embed_oracle(p: &ModelParams, ids: &[usize], segs: &[usize], acoustic: &Tensor) -> Tensor {
        let d = p.config().d_model;
        let (tok, pos, seg) = (
            p.store.value(p.layout.emb.token),
            p.store.value(p.layout.emb.position),
            p.store.value(p.layout.emb.segment),
        );
        let (gain, bias) = (p.store.value(p.layout.emb.ln_gain), p.store.value(p.layout.emb.ln_bias));
        let mut out = Vec::new();
        for i in 0..ids.len() {
            let row: Vec<f64> = (0..d)
                .map(|j| tok.get(ids[i], j) + pos.get(i, j) + seg.get(segs[i], j) + acoustic.get(i, j))
                .collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out.push((row[j] - mean) / (var + LN_EPS).sqrt() * gain.data()[j] + bias.data()[j]);
            }
        }
        Tensor::matrix(ids.len(), d, out).unwrap()
    }

    fn randomize(p: &mut ModelParams, seed: u64, std: f64) {
        let mut rng = Stream::new(seed).rng();
        let ids: Vec<ParamId> = p.store.ids().collect();
        for id in ids {
            let shape = p.store.value(id).shape().to_vec();
            let mut t = Tensor::randn(&shape, std, &mut rng);
            if p.store.name(id).ends_with("gain") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            p.store.set(id, t).unwrap();
        }
    }

    #[test]
    fn embedding_matches_oracle() {
        let mut p = tiny_params(1);
        randomize(&mut p, 2, 0.5);
        let ids = [1, 7, 9, 2, 12, 2];
        let segs = [0, 0, 0, 0, 1, 1];
        let mut rng = Stream::new(3).rng();
        let ac = Tensor::randn(&[6, 8], 0.3, &mut rng);
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        let a = g.constant(ac.clone());
        let x = embed_input(&mut g, &m, &ids, &segs, &[0, 1, 2, 3, 4, 5], Some(a)).unwrap();
        assert!(g.value(x).max_abs_diff(&embed_oracle(&p, &ids, &segs, &ac)) < 1e-12);
    }

    #[test]
    fn zero_acoustic_matches_text_only() {
        let p = tiny_params(4);
        let ids = [1, 5, 6, 2];
        let segs = [0, 0, 0, 1];
        let pos = [0, 1, 2, 3];
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        let z = g.constant(Tensor::zeros(&[4, 8]));
        let with = embed_input(&mut g, &m, &ids, &segs, &pos, Some(z)).unwrap();
        let without = embed_input(&mut g, &m, &ids, &segs, &pos, None).unwrap();
        assert_eq!(g.value(with), g.value(without));
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let mut p = tiny_params(5);
        for id in [p.layout.emb.token, p.layout.emb.position, p.layout.emb.segment] {
            let shape = p.store.value(id).shape().to_vec();
            p.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        let b = g.constant(Tensor::full(&[1, 8], 0.7));
        let x = embed_input(&mut g, &m, &[5], &[0], &[0], Some(b)).unwrap();
        assert!(g.value(x).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let p = tiny_params(6);
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        assert!(embed_input(&mut g, &m, &[16], &[0], &[0], None).is_err());
        assert!(embed_input(&mut g, &m, &[5], &[2], &[0], None).is_err());
        assert!(embed_input(&mut g, &m, &[5], &[0], &[16], None).is_err());
        assert!(embed_input(&mut g, &m, &[5, 6], &[0], &[0], None).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = EncoderConfig {
            layers: 0,
            ..EncoderConfig::tiny()
        };
        let p = ModelParams::init(&cfg, Stream::new(1)).unwrap();
        let mut g = Graph::new();
        let m = p.bind(&mut g, |_| false);
        let x = embed_input(&mut g, &m, &[1, 5, 2], &[0, 0, 0], &[0, 1, 2], None).unwrap();
        let out = encode(&mut g, &m, x, &[true; 3]).unwrap();
        assert_eq!(out.hidden, x);
    }

    #[test]
    fn padding_never_reaches_real_positions() {
        let mut p = ModelParams::init(
            &EncoderConfig {
                layers: 2,
                heads: 2,
                ..EncoderConfig::tiny()
            },
            Stream::new(8),
        )
        .unwrap();
        randomize(&mut p, 9, 0.4);
        let mut rng = Stream::new(10).rng();
        let base = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mask = [true, true, true, false, false];
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let m = p.bind(&mut g, |_| false);
            let x = g.constant(input.clone());
            let out = encode(&mut g, &m, x, &mask).unwrap();
            for layer in &out.attention {
                for a in layer {
                    for r in 0..5 {
                        let row = g.value(*a).row(r);
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                        assert_eq!(row[3], 0.0);
                        assert_eq!(row[4], 0.0);
                    }
                }
            }
            let cls = out.cls(&mut g).unwrap();
            g.value(cls).clone()
        };
        let mut perturbed = base.clone();
        for j in 0..8 {
            perturbed.data_mut()[3 * 8 + j] += 50.0;
            perturbed.data_mut()[4 * 8 + j] -= 3.0;
        }
        assert!(run(&base).max_abs_diff(&run(&perturbed)) <= 1e-10);
    }

    #[test]
    fn mlm_masking_rates() {
        let mut rng = Stream::new(12).rng();
        let ids: Vec<usize> = std::iter::once(CLS).chain(5..205).chain([SEP]).collect();
        let segs = vec![0; ids.len()];
        let (mut selected, mut masked, mut total) = (0usize, 0usize, 0usize);
        for _ in 0..200 {
            let s = mask_for_mlm(&ids, &segs, 256, &mut rng).unwrap();
            total += 200;
            selected += s.targets.len();
            masked += s.targets.iter().filter(|(p, _)| s.input_ids[*p] == MASK).count();
            assert_eq!(s.input_ids[0], CLS);
            assert_eq!(*s.input_ids.last().unwrap(), SEP);
        }
        let rate = selected as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let mask_rate = masked as f64 / selected as f64;
        assert!((mask_rate - 0.8).abs() < 0.02, "{mask_rate}");
        assert!(mask_for_mlm(&[CLS, SEP], &[0, 0], 256, &mut rng).is_err());
    }

    #[test]
    fn mlm_loss_starts_near_uniform() {
        let p = ModelParams::init(&EncoderConfig::default(), Stream::new(13)).unwrap();
        let mut rng = Stream::new(14).rng();
        let mut total = 0.0;
        for _ in 0..10 {
            let ids: Vec<usize> = std::iter::once(CLS)
                .chain((0..16).map(|_| rng.random_range(5..256)))
                .chain([SEP])
                .collect();
            let seq = mask_for_mlm(&ids, &vec![0; ids.len()], 256, &mut rng).unwrap();
            let mut g = Graph::new();
            let m = p.bind(&mut g, |_| false);
            let l = mlm_loss(&mut g, &m, &seq).unwrap();
            total += g.value(l).item();
        }
        let mean = total / 10.0;
        let uniform = 256f64.ln();
        assert!((mean - uniform).abs() < 0.1 * uniform, "{mean}");
    }

    #[test]
    fn mlm_gradients_match_finite_differences() {
        let mut p = tiny_params(15);
        randomize(&mut p, 16, 0.3);
        let seq = MaskedSequence {
            input_ids: vec![CLS, 6, MASK, 9, SEP],
            segment_ids: vec![0, 0, 0, 1, 1],
            targets: vec![(2, 7), (3, 9)],
        };
        let check: Vec<ParamId> = p
            .store
            .ids()
            .filter(|id| !matches!(p.group(*id), ParamGroup::ScoreHead | ParamGroup::Acoustic))
            .collect();
        let layout = p.layout.clone();
        let report = grad_check(&mut p.store, &check, &GradCheckConfig::default(), |g, b| {
            let m = BoundModel {
                layout: &layout,
                bound: b.clone(),
            };
            mlm_loss(g, &m, &seq)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
