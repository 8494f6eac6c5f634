//! Tape of tensor operations with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        index: Vec<Option<usize>>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumCols(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Mean(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::RowSoftmax(..) => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SumCols(..) => "sum_cols",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::Mean(..) => "mean",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Transpose(a) | Op::RowSoftmax(a) | Op::Gelu(a) | Op::SumCols(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) | Op::Mean(v) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Operation names that can carry an injected gradient fault.
pub const FAULTABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "mul",
    "scale",
    "transpose",
    "row_softmax",
    "layer_norm",
    "gelu",
    "gather_rows",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "sum_cols",
    "dropout",
    "cross_entropy",
    "mse",
    "mean",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`: one graph per thread and step.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    dropout_rng: Option<ChaCha8Rng>,
    dropout_rate: f64,
    fault: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub const GELU_COEFF: f64 = 0.044715;

pub fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Row-wise softmax of a row-major buffer with `cols` columns, using per-row
/// max subtraction.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    /// An evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout_rng: None,
            dropout_rate: 0.0,
            fault: None,
        }
    }

    /// A training graph whose dropout masks come from `stream`.
    pub fn training(stream: Stream, dropout_rate: f64) -> Self {
        Graph {
            dropout_rng: Some(stream.rng()),
            dropout_rate,
            ..Graph::new()
        }
    }

    /// Test hook: every gradient contribution emitted by `op` is scaled by
    /// 1.5, which gradient checks must detect.
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// participates in a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding a trainable (or frozen, if `requires_grad` is false)
    /// tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                node: format!("{context} (node #{} {})", v.0, self.op_name(v)),
            })
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).shape().len() > 2 {
            return Err(Error::shape(op, format!("rank-2 operand required, got {:?}", self.value(v).shape())));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank2("matmul", a)?;
        self.rank2("matmul", b)?;
        let ((p, q), (q2, _)) = (self.dims(a), self.dims(b));
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!("[{p}x{q}] x {:?}", self.value(b).shape()),
            ));
        }
        let out = matmul_kernel(self.value(a), self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank2("matmul_nt", a)?;
        self.rank2("matmul_nt", b)?;
        let ((p, q), (r, q2)) = (self.dims(a), self.dims(b));
        if q != q2 {
            return Err(Error::shape("matmul_nt", format!("[{p}x{q}] x [{r}x{q2}]^T")));
        }
        let out = matmul_nt_kernel(self.value(a), self.value(b));
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    /// Adds a bias vector (numel = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {cols}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.rank2("transpose", a)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), t.cols()));
        self.push(out, Op::RowSoftmax(a))
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::shape("layer_norm", "feature dimension must be at least 2"));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xs = self.value(x);
        let n = xs.rows();
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xs.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = xs.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Gelu(a))
    }

    /// Selects rows of `table`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        self.rank2("gather_rows", table)?;
        let (rows, cols) = self.dims(table);
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(index.len() * cols);
        for idx in index {
            match idx {
                Some(i) if *i < rows => data.extend_from_slice(t.row(*i)),
                Some(i) => {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("row {i} out of range for table with {rows} rows"),
                    ))
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), cols], data),
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.rank2("slice_rows", x)?;
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, cols], data), Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.rank2("slice_cols", x)?;
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let t = self.value(x);
        let data = (0..rows)
            .flat_map(|r| t.row(r)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            self.rank2("concat_rows", p)?;
            if self.value(p).cols() != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            self.rank2("concat_cols", p)?;
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Sums each row over its columns, giving an `[rows × 1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.rank2("sum_cols", x)?;
        let t = self.value(x);
        let rows = t.rows();
        let data = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        Ok(self.push(Tensor::from_parts(vec![rows, 1], data), Op::SumCols(x)))
    }

    /// Inverted dropout. Identity on evaluation graphs.
    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = self.dropout_rate;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let n = self.nodes[x.0].value.numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= cols) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy target {bad} out of range for {cols} classes"
            )));
        }
        let probs = softmax_rows(t.data(), cols);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                let row = t.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[k]
            })
            .sum::<f64>()
            / rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference over all coordinates.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b)))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("mean", "no inputs"));
        }
        if let Some(p) = parts.iter().find(|p| self.value(**p).numel() != 1) {
            return Err(Error::shape("mean", format!("non-scalar input {:?}", self.value(*p).shape())));
        }
        let s = parts.iter().map(|p| self.value(*p).item()).sum::<f64>() / parts.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(parts.to_vec())))
    }

    /// Reverse sweep from a scalar node. Gradients are retrievable with
    /// [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let mut contribs = self.local_grads(i, g);
            if self.fault == Some(node.op.name()) {
                for (_, t) in &mut contribs {
                    t.scale_assign(1.5);
                }
            }
            for (parent, t) in contribs {
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        node: format!("gradient of node #{i} ({})", node.op.name()),
                    });
                }
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let same = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, reshape_like(matmul_nt_kernel(g, val(*b)), val(*a))));
                }
                if wants(*b) {
                    out.push((*b, reshape_like(matmul_tn_kernel(val(*a), g), val(*b))));
                }
                out
            }
            Op::MatMulNt(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, reshape_like(matmul_kernel(g, val(*b)), val(*a))));
                }
                if wants(*b) {
                    out.push((*b, reshape_like(matmul_tn_kernel(g, val(*a)), val(*b))));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, bias) => {
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*a, g.clone()), (*bias, same(*bias, gb))]
            }
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, same(*a, ga)), (*b, same(*b, gb))]
            }
            Op::Scale(a, s) => vec![(*a, same(*a, g.data().iter().map(|x| x * s).collect()))],
            Op::Transpose(a) => vec![(*a, reshape_like(g.transpose(), val(*a)))],
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                vec![(*a, same(*a, out))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*x).cols();
                let gn = val(*gain).data();
                let mut gx = Vec::with_capacity(xhat.len());
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for ((hr, gr), r) in xhat.chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        gx.push(r * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h));
                    }
                }
                vec![(*x, same(*x, gx)), (*gain, same(*gain, gg)), (*bias, same(*bias, gbias))]
            }
            Op::Gelu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                vec![(*a, same(*a, data))]
            }
            Op::GatherRows { table, index } => {
                let t = val(*table);
                let cols = t.cols();
                let mut out = vec![0.0; t.numel()];
                for (r, idx) in index.iter().enumerate() {
                    if let Some(k) = idx {
                        let dst = &mut out[k * cols..(k + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                vec![(*table, same(*table, out))]
            }
            Op::SliceRows { x, start } => {
                let t = val(*x);
                let cols = t.cols();
                let mut out = vec![0.0; t.numel()];
                out[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                vec![(*x, same(*x, out))]
            }
            Op::SliceCols { x, start } => {
                let t = val(*x);
                let (cols, len) = (t.cols(), g.cols());
                let mut out = vec![0.0; t.numel()];
                for r in 0..t.rows() {
                    out[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                vec![(*x, same(*x, out))]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).numel();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        (*p, same(*p, piece))
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let pc = val(*p).cols();
                        let data = (0..g.rows())
                            .flat_map(|r| g.row(r)[offset..offset + pc].iter().copied())
                            .collect();
                        offset += pc;
                        (*p, same(*p, data))
                    })
                    .collect()
            }
            Op::SumCols(x) => {
                let t = val(*x);
                let cols = t.cols();
                let data = g.data().iter().flat_map(|gv| std::iter::repeat_n(*gv, cols)).collect();
                vec![(*x, same(*x, data))]
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                vec![(*x, same(*x, data))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g.item();
                let cols = val(*logits).cols();
                let scale = upstream / targets.len() as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &k) in targets.iter().enumerate() {
                    data[r * cols + k] -= scale;
                }
                vec![(*logits, same(*logits, data))]
            }
            Op::Mse(a, b) => {
                let n = val(*a).numel() as f64;
                let c = 2.0 * g.item() / n;
                let ga: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, same(*a, ga)), (*b, same(*b, gb))]
            }
            Op::Mean(parts) => {
                let share = g.item() / parts.len() as f64;
                parts.iter().map(|p| (*p, same(*p, vec![share]))).collect()
            }
        }
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), t.into_data())
}
