//! Temporal-spectral attention pooling of per-token acoustic frames.
//!
//! For a token with frame matrix `F` (`d_a × m`, one column per frame):
//!
//! ```text
//! A  = softmax_rows(W_a · F)          attention map, d_a × m
//! v  = Σ_j (A ⊙ F)[:, j]              pooled acoustic vector, d_a
//! v̂ = W_s · v + b_s                   acoustic embedding, d_t
//! ```
//!
//! Each spectral row of `A` is a distribution over the token's frames, so
//! every coordinate of `v` is a convex combination of that coordinate across
//! frames. Special tokens have no frames and contribute an all-zero `d_t`
//! vector (not `b_s`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Stream;

pub const INIT_STD: f64 = 0.02;

/// Frames of one token, stored frame-major (`m` rows of `d_a` values).
/// `m = 0` marks a special token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticFrames {
    dim: usize,
    frames: usize,
    data: Vec<f64>,
}

impl AcousticFrames {
    pub fn special(dim: usize) -> Self {
        AcousticFrames {
            dim,
            frames: 0,
            data: Vec::new(),
        }
    }

    /// Builds from frame rows; every row must have length `dim`.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some((j, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::shape(
                "acoustic frames",
                format!("frame {j} has {} values, expected {dim}", r.len()),
            ));
        }
        let data = rows.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: "acoustic frame".into(),
            });
        }
        Ok(AcousticFrames {
            dim,
            frames: rows.len(),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn is_special(&self) -> bool {
        self.frames == 0
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.frames).map(|j| self.frame(j).to_vec()).collect()
    }

    /// The `d_a × m` matrix with one column per frame.
    pub fn matrix(&self) -> Result<Tensor> {
        if self.is_special() {
            return Err(Error::InvalidInput(
                "special tokens carry no frames; attention pooling needs m >= 1".into(),
            ));
        }
        Ok(Tensor::matrix(self.frames, self.dim, self.data.clone())?.transpose())
    }

    /// Per-coordinate mean over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for j in 0..self.frames {
            for (o, v) in out.iter_mut().zip(self.frame(j)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.frames.max(1) as f64;
        }
        out
    }
}

/// Parameter handles for the attention pooling block inside a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TsaattIds {
    pub w_a: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

impl TsaattIds {
    /// Registers `tsaatt.w_a` (`d_a × d_a`), `tsaatt.w_s` (`d_t × d_a`) and
    /// `tsaatt.b_s` (`d_t`).
    pub fn register(store: &mut ParamStore, d_a: usize, d_t: usize, stream: Stream) -> Self {
        let p = TsaattParams::init(d_a, d_t, stream);
        TsaattIds {
            w_a: store.add("tsaatt.w_a", p.w_a, true),
            w_s: store.add("tsaatt.w_s", p.w_s, true),
            b_s: store.add("tsaatt.b_s", p.b_s, false),
        }
    }

    pub fn extract(&self, store: &ParamStore) -> TsaattParams {
        TsaattParams {
            w_a: store.value(self.w_a).clone(),
            w_s: store.value(self.w_s).clone(),
            b_s: store.value(self.b_s).clone(),
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        id == self.w_a || id == self.w_s || id == self.b_s
    }
}

/// Standalone parameter values, for inference outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TsaattParams {
    pub w_a: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
}

impl TsaattParams {
    pub fn init(d_a: usize, d_t: usize, stream: Stream) -> Self {
        let mut rng = stream.derive("tsaatt").rng();
        TsaattParams {
            w_a: Tensor::randn(&[d_a, d_a], INIT_STD, &mut rng),
            w_s: Tensor::randn(&[d_t, d_a], INIT_STD, &mut rng),
            b_s: Tensor::zeros(&[d_t]),
        }
    }

    pub fn new(w_a: Tensor, w_s: Tensor, b_s: Tensor) -> Result<Self> {
        let d_a = w_a.rows();
        if w_a.shape() != [d_a, d_a] || w_s.shape().len() != 2 || w_s.cols() != d_a {
            return Err(Error::shape(
                "tsaatt params",
                format!("w_a {:?}, w_s {:?}", w_a.shape(), w_s.shape()),
            ));
        }
        if b_s.numel() != w_s.rows() {
            return Err(Error::shape("tsaatt params", format!("b_s {:?}", b_s.shape())));
        }
        Ok(TsaattParams { w_a, w_s, b_s })
    }

    pub fn acoustic_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.w_s.rows()
    }

    fn bind(&self, g: &mut Graph) -> TsaattVars {
        TsaattVars {
            w_a: g.constant(self.w_a.clone()),
            w_s: g.constant(self.w_s.clone()),
            b_s: g.constant(self.b_s.clone()),
        }
    }

    /// Attention map `softmax_rows(W_a F)`.
    pub fn attend(&self, frames: &AcousticFrames) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let f = g.constant(frames.matrix()?);
        let a = attend(&mut g, vars.w_a, f)?;
        Ok(g.value(a).clone())
    }

    /// Pooled vector `Σ_j (A ⊙ F)_j`, length `d_a`.
    pub fn pool(&self, frames: &AcousticFrames, attention: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(frames.matrix()?);
        let a = g.constant(attention.clone());
        let v = pool(&mut g, f, a)?;
        g.value(v).clone().reshape(&[frames.dim()])
    }

    /// Affine projection `W_s v + b_s`.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        if v.numel() != self.acoustic_dim() {
            return Err(Error::shape(
                "project",
                format!("vector of {} values for d_a = {}", v.numel(), self.acoustic_dim()),
            ));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let v = g.constant(v.clone().reshape(&[1, v.numel()])?);
        let out = project(&mut g, &vars, v)?;
        g.value(out).clone().reshape(&[self.model_dim()])
    }

    /// Acoustic embedding of one token; zero for special tokens.
    pub fn encode_token(&self, frames: &AcousticFrames) -> Result<Tensor> {
        if frames.is_special() {
            return Ok(Tensor::zeros(&[self.model_dim()]));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = encode_tokens(&mut g, &vars, &[frames])?;
        g.value(out).clone().reshape(&[self.model_dim()])
    }
}

/// Graph handles of the three attention-pooling parameters.
#[derive(Clone, Copy, Debug)]
pub struct TsaattVars {
    pub w_a: Var,
    pub w_s: Var,
    pub b_s: Var,
}

impl TsaattVars {
    pub fn from_bound(ids: &TsaattIds, bound: &crate::numerics::Bound) -> Self {
        TsaattVars {
            w_a: bound.var(ids.w_a),
            w_s: bound.var(ids.w_s),
            b_s: bound.var(ids.b_s),
        }
    }
}

/// `softmax_rows(W_a · F)`, normalized over the temporal axis.
pub fn attend(g: &mut Graph, w_a: Var, frames: Var) -> Result<Var> {
    let logits = g.matmul(w_a, frames)?;
    Ok(g.row_softmax(logits))
}

/// `Σ_j (A ⊙ F)[:, j]` as a `d_a × 1` column.
pub fn pool(g: &mut Graph, frames: Var, attention: Var) -> Result<Var> {
    let weighted = g.mul(attention, frames)?;
    g.sum_cols(weighted)
}

/// Row-wise `v W_sᵀ + b_s` for `v` stacked as `n × d_a`.
pub fn project(g: &mut Graph, vars: &TsaattVars, pooled_rows: Var) -> Result<Var> {
    let z = g.matmul_nt(pooled_rows, vars.w_s)?;
    g.add_row(z, vars.b_s)
}

/// Acoustic embeddings of real tokens, stacked as an `n × d_t` matrix in
/// input order. Special tokens are rejected; callers place zero rows for
/// them.
pub fn encode_tokens(g: &mut Graph, vars: &TsaattVars, tokens: &[&AcousticFrames]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("no tokens to encode".into()));
    }
    let mut columns = Vec::with_capacity(tokens.len());
    for frames in tokens {
        let f = g.constant(frames.matrix()?);
        let a = attend(g, vars.w_a, f)?;
        columns.push(pool(g, f, a)?);
    }
    let stacked = g.concat_cols(&columns)?;
    let rows = g.transpose(stacked)?;
    project(g, vars, rows)
}

/// Mean squared error between the acoustic embeddings of `tokens` and the
/// matching rows of `targets` (`n × d_t`, typically frozen token
/// embeddings).
pub fn pretrain_loss(
    g: &mut Graph,
    vars: &TsaattVars,
    tokens: &[&AcousticFrames],
    targets: Var,
) -> Result<Var> {
    if tokens.iter().any(|t| t.is_special()) {
        return Err(Error::InvalidInput(
            "special tokens are excluded from acoustic pretraining".into(),
        ));
    }
    let predicted = encode_tokens(g, vars, tokens)?;
    g.mse(predicted, targets)
}
