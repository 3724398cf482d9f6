//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value. `backward`
//! walks the list once in reverse; because nodes are only ever appended
//! after their inputs, list order is a topological order.

use std::collections::BTreeMap;

use super::kernels::{gelu, gelu_grad, gemm, log_sum_exp, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{MadiError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Softmax { x: Var, causal: bool },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, floor: f64 },
    RowCosine { a: Var, b: Var, floor: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::RowCosine { .. } => "row_cosine",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StopGradient(..) => "stop_gradient",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b) => vec![*a, *b],
            Op::RowCosine { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StopGradient(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::NormalizeRows { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a parameter, if it was reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Gradient with respect to any node on the tape (zero-filled when the
    /// node did not receive gradient).
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.nodes[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

/// A single-threaded recording of primitive operations.
pub struct Tape {
    nodes: Vec<Node>,
    frozen_stops: Option<Vec<Tensor>>,
    stops_seen: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(context: &str, expected: &[usize], actual: &[usize]) -> MadiError {
    MadiError::Shape {
        context: context.to_string(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn matrix_dims(t: &Tensor, context: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(MadiError::contract(format!(
            "{context} expects a matrix, got shape {s:?}"
        ))),
    }
}

/// Forward evaluation shared by recording and replay.
fn evaluate<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Leaf | Op::Param(_) | Op::StopGradient(_) => {
            unreachable!("leaves and stop-gradient are handled by the caller")
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (x, y) = (get(*a), get(*b));
            if x.shape() != y.shape() {
                return Err(shape_err(op.name(), x.shape(), y.shape()));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| match op {
                    Op::Add(..) => p + q,
                    Op::Sub(..) => p - q,
                    _ => p * q,
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::AddRow(a, b) | Op::MulRow(a, b) => {
            let (x, r) = (get(*a), get(*b));
            let (_, c) = matrix_dims(x, op.name())?;
            if r.shape() != [c] {
                return Err(shape_err(op.name(), &[c], r.shape()));
            }
            let add = matches!(op, Op::AddRow(..));
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                for (v, w) in row.iter_mut().zip(r.data()) {
                    if add {
                        *v += w;
                    } else {
                        *v *= w;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Scale(x, s) => {
            let x = get(*x);
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
        }
        Op::MatMul(a, b) | Op::MatMulT(a, b) => {
            let (x, y) = (get(*a), get(*b));
            let (m, k) = matrix_dims(x, op.name())?;
            let (br, bc) = matrix_dims(y, op.name())?;
            let transposed = matches!(op, Op::MatMulT(..));
            let (bk, n) = if transposed { (bc, br) } else { (br, bc) };
            if bk != k {
                return Err(shape_err(op.name(), &[k, n], y.shape()));
            }
            let mut out = vec![0.0; m * n];
            let bref = MatRef::new(y.data(), br, bc);
            let bref = if transposed { bref.t() } else { bref };
            gemm(MatRef::new(x.data(), m, k), bref, &mut out, 0.0);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Transpose(x) => {
            let x = get(*x);
            let (r, c) = matrix_dims(x, "transpose")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
        Op::Softmax { x, causal } => {
            let x = get(*x);
            let (r, c) = matrix_dims(x, "softmax")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let limit = if *causal { (i + 1 + c.saturating_sub(r)).min(c) } else { c };
                let row = &x.data()[i * c..i * c + limit];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[i * c..i * c + limit];
                let mut s = 0.0;
                for (dst, v) in o.iter_mut().zip(row) {
                    *dst = (v - m).exp();
                    s += *dst;
                }
                for dst in o.iter_mut() {
                    *dst /= s;
                }
            }
            Tensor::from_parts(vec![r, c], out)
        }
        Op::LayerNorm { x, eps } => {
            let x = get(*x);
            let (r, c) = matrix_dims(x, "layer_norm")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = x.row(i);
                let (mean, rstd) = row_moments(row, *eps);
                for (dst, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *dst = (v - mean) * rstd;
                }
            }
            Tensor::from_parts(vec![r, c], out)
        }
        Op::Gelu(x) | Op::Exp(x) | Op::Log(x) | Op::Abs(x) => {
            let t = get(*x);
            let f: fn(f64) -> f64 = match op {
                Op::Gelu(_) => gelu,
                Op::Exp(_) => f64::exp,
                Op::Log(_) => f64::ln,
                _ => f64::abs,
            };
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
        }
        Op::ConcatRows(xs) => {
            let first = get(xs[0]);
            let (_, c) = matrix_dims(first, "concat_rows")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for v in xs {
                let t = get(*v);
                let (r, cc) = matrix_dims(t, "concat_rows")?;
                if cc != c {
                    return Err(shape_err("concat_rows", &[r, c], t.shape()));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, c], data)
        }
        Op::ConcatCols(xs) => {
            let first = get(xs[0]);
            let (r, _) = matrix_dims(first, "concat_cols")?;
            let mut widths = Vec::with_capacity(xs.len());
            for v in xs {
                let t = get(*v);
                let (rr, cc) = matrix_dims(t, "concat_cols")?;
                if rr != r {
                    return Err(shape_err("concat_cols", &[r, cc], t.shape()));
                }
                widths.push(cc);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in xs {
                    data.extend_from_slice(get(*v).row(i));
                }
            }
            Tensor::from_parts(vec![r, total], data)
        }
        Op::SliceRows { x, start, len } => {
            let t = get(*x);
            let (r, c) = matrix_dims(t, "slice_rows")?;
            if *len == 0 || start + len > r {
                return Err(MadiError::contract(format!(
                    "slice_rows {start}..{} out of {r} rows",
                    start + len
                )));
            }
            Tensor::from_parts(vec![*len, c], t.data()[start * c..(start + len) * c].to_vec())
        }
        Op::SliceCols { x, start, len } => {
            let t = get(*x);
            let (r, c) = matrix_dims(t, "slice_cols")?;
            if *len == 0 || start + len > c {
                return Err(MadiError::contract(format!(
                    "slice_cols {start}..{} out of {c} cols",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[*start..start + len]);
            }
            Tensor::from_parts(vec![r, *len], data)
        }
        Op::Gather { table, ids } => {
            let t = get(*table);
            let (v, c) = matrix_dims(t, "gather")?;
            if ids.is_empty() {
                return Err(MadiError::contract("gather needs at least one id"));
            }
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= v {
                    return Err(MadiError::contract(format!("gather id {id} out of {v} rows")));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::from_parts(vec![ids.len(), c], data)
        }
        Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
        Op::Mean(x) => {
            let t = get(*x);
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        }
        Op::NormalizeRows { x, floor } => {
            let t = get(*x);
            let (r, c) = matrix_dims(t, "normalize_rows")?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = t.row(i);
                let n = norm(row).max(*floor);
                data.extend(row.iter().map(|v| v / n));
            }
            Tensor::from_parts(vec![r, c], data)
        }
        Op::RowCosine { a, b, floor } => {
            let (x, y) = (get(*a), get(*b));
            if x.shape() != y.shape() {
                return Err(shape_err("row_cosine", x.shape(), y.shape()));
            }
            let (r, _) = matrix_dims(x, "row_cosine")?;
            let data = (0..r)
                .map(|i| cosine(x.row(i), y.row(i), *floor))
                .collect();
            Tensor::from_parts(vec![r], data)
        }
        Op::CrossEntropy { logits, targets } => {
            let t = get(*logits);
            let (r, c) = matrix_dims(t, "cross_entropy")?;
            if targets.len() != r {
                return Err(shape_err("cross_entropy targets", &[r], &[targets.len()]));
            }
            let mut total = 0.0;
            for (i, &tgt) in targets.iter().enumerate() {
                if tgt >= c {
                    return Err(MadiError::contract(format!(
                        "cross_entropy target {tgt} out of {c} classes"
                    )));
                }
                let row = t.row(i);
                if row[tgt] == f64::INFINITY {
                    continue;
                }
                total += log_sum_exp(row) - row[tgt];
            }
            Tensor::scalar(total)
        }
    };
    Ok(out)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with both norms floored at `floor`.
pub fn cosine(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(floor) * norm(b).max(floor))
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen_stops: None,
            stops_seen: 0,
        }
    }

    /// A tape whose stop-gradient nodes emit the given values (in recording
    /// order) instead of their inputs. Evaluating a loss on such a tape gives
    /// the surrogate function whose exact derivative is the stop-gradient /
    /// straight-through gradient, which is what finite differences check.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Tape {
            nodes: Vec::new(),
            frozen_stops: Some(values),
            stops_seen: 0,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Values emitted by every stop-gradient node, in recording order.
    pub fn stop_gradient_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient(_)))
            .map(|n| n.value.clone())
            .collect()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            evaluate(&op, &|v: Var| &nodes[v.0].value)?
        };
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Input data that does not receive gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Free leaf that receives gradient (used by tests and oracles).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Binds a parameter; frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let requires_grad = !store.is_frozen(id);
        self.push_raw(store.get(id).clone(), Op::Param(id), requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(x, row))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns
    /// `0..=i + (cols - rows)`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.push(Op::Softmax { x, causal })
    }

    /// Row-wise normalisation to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Abs(x))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(MadiError::contract("concat_rows of nothing"));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(MadiError::contract("concat_cols of nothing"));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, len })
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.push(Op::NormalizeRows { x, floor })
    }

    /// Per-row cosine similarity of two equally shaped matrices.
    pub fn row_cosine(&mut self, a: Var, b: Var, floor: f64) -> Result<Var> {
        self.push(Op::RowCosine { a, b, floor })
    }

    /// Summed negative log-softmax of the target column of each row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Identity on the forward pass, zero gradient on the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &self.frozen_stops {
            Some(stops) => {
                let v = stops.get(self.stops_seen).cloned().ok_or_else(|| {
                    MadiError::contract("frozen tape recorded more stop-gradients than provided")
                })?;
                if v.shape() != self.shape(x) {
                    return Err(shape_err("frozen stop_gradient", self.shape(x), v.shape()));
                }
                v
            }
            None => self.value(x).clone(),
        };
        self.stops_seen += 1;
        Ok(self.push_raw(value, Op::StopGradient(x), false))
    }

    /// Straight-through estimator: forward value `target`, gradient copied
    /// unchanged to `x`. Built as `x + sg(target − x)`.
    pub fn straight_through(&mut self, x: Var, target: Var) -> Result<Var> {
        let diff = self.sub(target, x)?;
        let frozen = self.stop_gradient(diff)?;
        self.add(x, frozen)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::Param(_) => node.value.clone(),
                Op::StopGradient(x) => {
                    if self.frozen_stops.is_some() {
                        node.value.clone()
                    } else {
                        values[x.0].clone()
                    }
                }
                op => {
                    let vals = &values;
                    evaluate(op, &|v: Var| &vals[v.0])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(MadiError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(MadiError::Numerical {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backprop_node(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                match params.get_mut(&id) {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g.clone()));
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let buf = acc(grads, v, g.len());
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d += sign * s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let buf = acc(grads, v, g.len());
                        for (d, s) in buf.iter_mut().zip(g) {
                            *d += sign * s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                if self.wants(*a) {
                    let buf = acc(grads, *a, g.len());
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(xb) {
                        *d += s * y;
                    }
                }
                if self.wants(*b) {
                    let buf = acc(grads, *b, g.len());
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(xa) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let c = val(*r).numel();
                if self.wants(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(*r) {
                    let buf = acc(grads, *r, c);
                    for row in g.chunks(c) {
                        for (d, s) in buf.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let rv = val(*r).data();
                let xv = val(*x).data();
                let c = rv.len();
                if self.wants(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (brow, grow) in buf.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, s), w) in brow.iter_mut().zip(grow).zip(rv) {
                            *d += s * w;
                        }
                    }
                }
                if self.wants(*r) {
                    let buf = acc(grads, *r, c);
                    for (xrow, grow) in xv.chunks(c).zip(g.chunks(c)) {
                        for ((d, s), xx) in buf.iter_mut().zip(grow).zip(xrow) {
                            *d += s * xx;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (d, v) in buf.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (m, k) = (xa.shape()[0], xa.shape()[1]);
                let n = xb.shape()[1];
                let gm = MatRef::new(g, m, n);
                if self.wants(*a) {
                    let buf = acc(grads, *a, m * k);
                    gemm(gm, MatRef::new(xb.data(), k, n).t(), buf, 1.0);
                }
                if self.wants(*b) {
                    let buf = acc(grads, *b, k * n);
                    gemm(MatRef::new(xa.data(), m, k).t(), gm, buf, 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (xa, xb) = (val(*a), val(*b));
                let (m, k) = (xa.shape()[0], xa.shape()[1]);
                let n = xb.shape()[0];
                let gm = MatRef::new(g, m, n);
                if self.wants(*a) {
                    let buf = acc(grads, *a, m * k);
                    gemm(gm, MatRef::new(xb.data(), n, k), buf, 1.0);
                }
                if self.wants(*b) {
                    let buf = acc(grads, *b, n * k);
                    gemm(gm.t(), MatRef::new(xa.data(), m, k), buf, 1.0);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let buf = acc(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, .. } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let buf = acc(grads, *x, y.len());
                    for ((yr, gr), br) in y.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yy), gg) in br.iter_mut().zip(yr).zip(gr) {
                            *d += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let y = node.value.data();
                    let c = xv.shape()[1];
                    let nf = c as f64;
                    let buf = acc(grads, *x, y.len());
                    for i in 0..xv.shape()[0] {
                        let (_, rstd) = row_moments(xv.row(i), *eps);
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[i * c + j] += rstd / nf * (nf * gr[j] - sg - yr[j] * sgy);
                        }
                    }
                }
            }
            Op::Gelu(x) | Op::Exp(x) | Op::Log(x) | Op::Abs(x) => {
                if self.wants(*x) {
                    let xv = val(*x).data();
                    let y = node.value.data();
                    let buf = acc(grads, *x, g.len());
                    for i in 0..g.len() {
                        let local = match node.op {
                            Op::Gelu(_) => gelu_grad(xv[i]),
                            Op::Exp(_) => y[i],
                            Op::Log(_) => 1.0 / xv[i],
                            _ => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        buf[i] += g[i] * local;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for v in xs {
                    let len = val(*v).numel();
                    if self.wants(*v) {
                        let buf = acc(grads, *v, len);
                        for (d, s) in buf.iter_mut().zip(&g[offset..offset + len]) {
                            *d += s;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut col = 0;
                for v in xs {
                    let w = val(*v).shape()[1];
                    if self.wants(*v) {
                        let buf = acc(grads, *v, rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start, .. } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let c = xv.shape()[1];
                    let buf = acc(grads, *x, xv.numel());
                    for (d, s) in buf[start * c..].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let (r, c) = (xv.shape()[0], xv.shape()[1]);
                    let buf = acc(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..*len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tv = val(*table);
                    let c = tv.shape()[1];
                    let buf = acc(grads, *table, tv.numel());
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[id * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let n = val(*x).numel();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    let buf = acc(grads, *x, n);
                    for d in buf.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::NormalizeRows { x, floor } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let y = node.value.data();
                    let c = xv.shape()[1];
                    let buf = acc(grads, *x, y.len());
                    for i in 0..xv.shape()[0] {
                        let n = norm(xv.row(i));
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        if n > *floor {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                buf[i * c + j] += (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                buf[i * c + j] += gr[j] / floor;
                            }
                        }
                    }
                }
            }
            Op::RowCosine { a, b, floor } => {
                let (xa, xb) = (val(*a), val(*b));
                let c = xa.shape()[1];
                let cosv = node.value.data();
                for (target, other, is_a) in [(*a, xb, true), (*b, xa, false)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let own = if is_a { xa } else { xb };
                    let buf = acc(grads, target, own.numel());
                    for i in 0..own.shape()[0] {
                        let (r_own, r_oth) = (own.row(i), other.row(i));
                        let n_own = norm(r_own);
                        let n_oth = norm(r_oth).max(*floor);
                        let denom = n_own.max(*floor) * n_oth;
                        for j in 0..c {
                            let mut d = r_oth[j] / denom;
                            if n_own > *floor {
                                d -= cosv[i] * r_own[j] / (n_own * n_own);
                            }
                            buf[i * c + j] += g[i] * d;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = val(*logits);
                    let c = lv.shape()[1];
                    let buf = acc(grads, *logits, lv.numel());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = lv.row(i);
                        if row[t] == f64::INFINITY {
                            continue;
                        }
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[i * c + j] += g[0] * (p - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
