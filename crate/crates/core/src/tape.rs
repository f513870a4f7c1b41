//! Reverse-mode autodiff over dense row-major `f64` matrices.
//!
//! Parameters live in a [`ParamStore`] that outlives any single forward pass.
//! A [`Tape`] borrows the store, records one computation as a flat list of
//! nodes, and on [`Tape::backward`] accumulates gradients per parameter.
//! Tapes are rebuilt per sample; nodes only reference earlier nodes, so the
//! recorded order is already topological.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Owns every trainable (and frozen) tensor of a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "param {name}: data length mismatch");
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
            trainable: true,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, pid: ParamId) -> &ParamTensor {
        &self.tensors[pid.0]
    }

    pub fn get_mut(&mut self, pid: ParamId) -> &mut ParamTensor {
        &mut self.tensors[pid.0]
    }

    pub fn set_trainable(&mut self, pid: ParamId, trainable: bool) {
        self.tensors[pid.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.len()).sum()
    }

    /// Snapshot of all tensor values, for checkpointing the best epoch.
    pub fn export_values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.clone()).collect()
    }

    pub fn import_values(&mut self, values: &[Vec<f64>]) {
        assert_eq!(values.len(), self.tensors.len());
        for (t, v) in self.tensors.iter_mut().zip(values) {
            assert_eq!(t.data.len(), v.len());
            t.data.copy_from_slice(v);
        }
    }
}

/// Per-parameter gradient accumulator shared across a mini-batch.
#[derive(Clone, Debug)]
pub struct GradAccum {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    pub fn absorb(&mut self, tape_grads: Vec<Option<Vec<f64>>>) {
        if self.grads.len() < tape_grads.len() {
            self.grads.resize(tape_grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(tape_grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&[f64]> {
        self.grads.get(pid.0).and_then(|g| g.as_deref())
    }

    pub fn into_inner(self) -> Vec<Option<Vec<f64>>> {
        self.grads
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param { pid: ParamId },
    ParamRow { pid: ParamId, row: usize },
    MatMul { a: NodeId, b: NodeId },
    MatMulTransB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Softplus { a: NodeId },
    Abs { a: NodeId },
    SoftmaxRows { a: NodeId },
    CausalSoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId },
    BroadcastRowAdd { a: NodeId, row: NodeId },
    BroadcastRowMul { a: NodeId, row: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    FlattenRow { a: NodeId },
    MeanRows { a: NodeId },
    ColSums { a: NodeId },
    SumAll { a: NodeId },
    NormalizeRows { a: NodeId },
    LogSumExpRow { a: NodeId },
    CrossEntropyLogits { logits: NodeId, target: usize },
    GatherCols { a: NodeId, indices: Vec<usize> },
    RotateHalfCols { a: NodeId },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, rows, cols, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Const, rows, cols, data)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v], 1, 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(vec![0.0; rows * cols], rows, cols)
    }

    pub fn param(&mut self, pid: ParamId) -> NodeId {
        let t = self.store.get(pid);
        self.push(Op::Param { pid }, t.rows, t.cols, t.data.clone())
    }

    pub fn param_row(&mut self, pid: ParamId, row: usize) -> NodeId {
        let t = self.store.get(pid);
        assert!(row < t.rows, "param {} row {row} out of {}", t.name, t.rows);
        self.push(Op::ParamRow { pid, row }, 1, t.cols, t.row(row).to_vec())
    }

    // ---- binary ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul shapes ({m}x{k})({k2}x{n})");
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        self.push(Op::MatMul { a, b }, m, n, out)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_trans_b shapes ({m}x{k})({n}x{k2})^T");
        let mut out = vec![0.0; m * n];
        mm_tb(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        self.push(Op::MatMulTransB { a, b }, m, n, out)
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, r, c, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x / y, Op::Div { a, b })
    }

    // ---- unary -----------------------------------------------------------

    fn elementwise1(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(op, r, c, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise1(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise1(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, f64::exp, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, f64::ln, Op::Ln { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, softplus, Op::Softplus { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.elementwise1(a, f64::abs, Op::Abs { a })
    }

    // ---- rows / shape ----------------------------------------------------

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&self.nodes[a.0].value[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(Op::SoftmaxRows { a }, r, c, out)
    }

    /// Row i is softmaxed over columns `0..=i`; the rest are exact zeros.
    pub fn causal_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "causal softmax expects a square score matrix");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&self.nodes[a.0].value[i * c..i * c + i + 1], &mut out[i * c..i * c + i + 1]);
        }
        self.push(Op::CausalSoftmaxRows { a }, r, c, out)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let x = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let std = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (x[j] - mean) / std;
            }
        }
        self.push(Op::LayerNormRows { a }, r, c, out)
    }

    pub fn broadcast_row_add(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "broadcast row width mismatch");
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        self.push(Op::BroadcastRowAdd { a, row }, r, c, out)
    }

    pub fn broadcast_row_mul(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "broadcast row width mismatch");
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= self.nodes[row.0].value[j];
            }
        }
        self.push(Op::BroadcastRowMul { a, row }, r, c, out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows width mismatch");
            value.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, rows, cols, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols height mismatch");
            for i in 0..rows {
                value[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, rows, total, value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows {start}+{len} > {r}");
        let value = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { a, start }, len, c, value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let mut value = vec![0.0; r * len];
        for i in 0..r {
            value[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].value[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { a, start }, r, len, value)
    }

    /// Row-major reshape of an `r x c` matrix into a single `1 x rc` row.
    pub fn flatten_row(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.clone();
        self.push(Op::FlattenRow { a }, 1, r * c, value)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(r > 0);
        let mut value = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                value[j] += self.nodes[a.0].value[i * c + j];
            }
        }
        for v in value.iter_mut() {
            *v /= r as f64;
        }
        self.push(Op::MeanRows { a }, 1, c, value)
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut value = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                value[j] += self.nodes[a.0].value[i * c + j];
            }
        }
        self.push(Op::ColSums { a }, 1, c, value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().sum();
        self.push(Op::SumAll { a }, 1, 1, vec![value])
    }

    /// Each row divided by its Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let x = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..c {
                    value[i * c + j] = x[j] / norm;
                }
            }
        }
        self.push(Op::NormalizeRows { a }, r, c, value)
    }

    pub fn log_sum_exp_row(&mut self, a: NodeId) -> NodeId {
        let (r, _c) = self.shape(a);
        assert_eq!(r, 1, "log_sum_exp_row expects a single row");
        let x = &self.nodes[a.0].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(Op::LogSumExpRow { a }, 1, 1, vec![value])
    }

    /// `-log softmax(logits)[target]`, fused for numerical stability.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> NodeId {
        let (r, c) = self.shape(logits);
        assert_eq!(r, 1, "cross_entropy_logits expects a single row");
        assert!(target < c, "target {target} out of {c} classes");
        let x = &self.nodes[logits.0].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = lse - x[target];
        self.push(Op::CrossEntropyLogits { logits, target }, 1, 1, vec![value])
    }

    /// Column gather from a single row; indices may repeat.
    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "gather_cols expects a single row");
        let value: Vec<f64> = indices
            .iter()
            .map(|&i| {
                assert!(i < c);
                self.nodes[a.0].value[i]
            })
            .collect();
        self.push(Op::GatherCols { a, indices: indices.to_vec() }, 1, indices.len(), value)
    }

    /// Per row, maps column pairs `(x0, x1)` to `(-x1, x0)` (rotary helper).
    pub fn rotate_half_cols(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(c % 2, 0, "rotate_half_cols needs an even column count");
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in (0..c).step_by(2) {
                value[i * c + j] = -self.nodes[a.0].value[i * c + j + 1];
                value[i * c + j + 1] = self.nodes[a.0].value[i * c + j];
            }
        }
        self.push(Op::RotateHalfCols { a }, r, c, value)
    }

    /// `x w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.broadcast_row_add(xw, b)
    }

    // ---- backward --------------------------------------------------------

    /// Seeds the scalar `loss` with gradient 1 and walks the tape in reverse.
    /// Returns per-parameter gradients indexed by `ParamId`.
    pub fn backward(&mut self, loss: NodeId) -> Vec<Option<Vec<f64>>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            // Ops only reference earlier nodes, so the node's own gradient can
            // be moved out while upstream gradients are accumulated, then put
            // back for callers that inspect intermediate grads.
            let op = self.nodes[idx].op.clone();
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            let g = std::mem::take(&mut self.nodes[idx].grad);
            match op {
                Op::Const => {}
                Op::Param { pid } => {
                    let acc = param_grads[pid.0].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::ParamRow { pid, row } => {
                    let t = self.store.get(pid);
                    let acc = param_grads[pid.0].get_or_insert_with(|| vec![0.0; t.len()]);
                    for (j, b) in g.iter().enumerate() {
                        acc[row * t.cols + j] += b;
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(a);
                    let n = cols;
                    let mut da = vec![0.0; m * k];
                    mm_tb(&g, &self.nodes[b.0].value, m, n, k, &mut da);
                    let mut db = vec![0.0; k * n];
                    mm_ta(&self.nodes[a.0].value, &g, m, k, n, &mut db);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulTransB { a, b } => {
                    // c = a b^T : da = g b ; db = g^T a
                    let (m, k) = self.shape(a);
                    let n = cols;
                    let mut da = vec![0.0; m * k];
                    mm(&g, &self.nodes[b.0].value, m, n, k, &mut da);
                    let mut db = vec![0.0; n * k];
                    mm_ta(&g, &self.nodes[a.0].value, m, n, k, &mut db);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].value).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].value).map(|(gv, av)| gv * av).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Div { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].value).map(|(gv, bv)| gv / bv).collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(a, &da);
                }
                Op::AddScalar { a, .. } => self.accumulate(a, &g),
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].value)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].value)
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[idx].value).map(|(gv, y)| gv * y).collect();
                    self.accumulate(a, &da);
                }
                Op::Ln { a } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].value).map(|(gv, x)| gv / x).collect();
                    self.accumulate(a, &da);
                }
                Op::Softplus { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, x)| gv * sigmoid(*x))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Abs { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, x)| gv * x.signum() * (*x != 0.0) as usize as f64)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows { a } | Op::CausalSoftmaxRows { a } => {
                    // Masked columns have y = 0, so one formula covers both.
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let y = &self.nodes[idx].value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..cols {
                            da[i * cols + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNormRows { a } => {
                    let mut da = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for i in 0..rows {
                        let x = &self.nodes[a.0].value[i * cols..(i + 1) * cols];
                        let y = &self.nodes[idx].value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let mean = x.iter().sum::<f64>() / nf;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let std = (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / nf;
                        let gy_mean = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / nf;
                        for j in 0..cols {
                            da[i * cols + j] = (gr[j] - g_mean - y[j] * gy_mean) / std;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::BroadcastRowAdd { a, row } => {
                    self.accumulate(a, &g);
                    let mut dr = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dr[j] += g[i * cols + j];
                        }
                    }
                    self.accumulate(row, &dr);
                }
                Op::BroadcastRowMul { a, row } => {
                    let mut da = vec![0.0; rows * cols];
                    let mut dr = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = g[i * cols + j] * self.nodes[row.0].value[j];
                            dr[j] += g[i * cols + j] * self.nodes[a.0].value[i * cols + j];
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(row, &dr);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        self.accumulate(p, &g[offset..offset + r * c]);
                        offset += r * c;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * cols + offset..i * cols + offset + c]);
                        }
                        self.accumulate(p, &dp);
                        offset += c;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (_ar, ac) = self.shape(a);
                    let mut da = vec![0.0; self.nodes[a.0].value.len()];
                    da[start * ac..start * ac + g.len()].copy_from_slice(&g);
                    self.accumulate(a, &da);
                }
                Op::SliceCols { a, start } => {
                    let (ar, ac) = self.shape(a);
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..rows {
                        da[i * ac + start..i * ac + start + cols]
                            .copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    self.accumulate(a, &da);
                }
                Op::FlattenRow { a } => self.accumulate(a, &g),
                Op::MeanRows { a } => {
                    let (ar, ac) = self.shape(a);
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for j in 0..ac {
                            da[i * ac + j] = g[j] / ar as f64;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ColSums { a } => {
                    let (ar, ac) = self.shape(a);
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        da[i * ac..(i + 1) * ac].copy_from_slice(&g);
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll { a } => {
                    let da = vec![g[0]; self.nodes[a.0].value.len()];
                    self.accumulate(a, &da);
                }
                Op::NormalizeRows { a } => {
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let x = &self.nodes[a.0].value[i * cols..(i + 1) * cols];
                        let y = &self.nodes[idx].value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..cols {
                                da[i * cols + j] = (gr[j] - y[j] * dot) / norm;
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LogSumExpRow { a } => {
                    let x = &self.nodes[a.0].value;
                    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
                    let da: Vec<f64> = x.iter().map(|v| g[0] * (v - m).exp() / z).collect();
                    self.accumulate(a, &da);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let x = &self.nodes[logits.0].value;
                    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
                    let mut da: Vec<f64> = x.iter().map(|v| g[0] * (v - m).exp() / z).collect();
                    da[target] -= g[0];
                    self.accumulate(logits, &da);
                }
                Op::GatherCols { a, indices } => {
                    let mut da = vec![0.0; self.nodes[a.0].value.len()];
                    for (j, &i) in indices.iter().enumerate() {
                        da[i] += g[j];
                    }
                    self.accumulate(a, &da);
                }
                Op::RotateHalfCols { a } => {
                    // y[2i] = -x[2i+1], y[2i+1] = x[2i]
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in (0..cols).step_by(2) {
                            da[i * cols + j] = g[i * cols + j + 1];
                            da[i * cols + j + 1] = -g[i * cols + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            self.nodes[idx].grad = g;
        }
        param_grads
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        let dst = &mut self.nodes[id.0].grad;
        debug_assert_eq!(dst.len(), g.len());
        for (a, b) in dst.iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

// out += a(m x k) b(k x n), row-major, ikj order for locality.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

// out += a(m x k) b(n x k)^T
fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * n + j] += s;
        }
    }
}

// out += a(m x k)^T b(m x n)  -> (k x n)
fn mm_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let ar = &a[p * k..(p + 1) * k];
        let br = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// Maps a validation error into the crate error type where dimension checks
/// are data-dependent rather than programmer errors.
pub fn dim_check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(store: &mut ParamStore, pid: ParamId, f: &mut dyn FnMut(&ParamStore) -> f64, analytic: &[f64]) {
        let len = store.get(pid).len();
        for i in 0..len {
            let orig = store.get(pid).data[i];
            let h = 1e-5 * (1.0 + orig.abs());
            store.get_mut(pid).data[i] = orig + h;
            let fp = f(store);
            store.get_mut(pid).data[i] = orig - h;
            let fm = f(store);
            store.get_mut(pid).data[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "coord {i}: analytic {} vs numeric {num}", analytic[i]);
        }
    }

    #[test]
    fn matmul_forward_matches_naive() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let b = t.constant(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], 3, 2);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_trans_b_matches_matmul() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], 2, 2);
        let bt = t.constant(vec![5.0, 7.0, 6.0, 8.0], 2, 2);
        let c1 = t.matmul_trans_b(a, b);
        let c2 = t.matmul(a, bt);
        assert_eq!(t.value(c1), t.value(c2));
    }

    #[test]
    fn backward_through_mixed_graph_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng_vals = vec![0.3, -0.7, 0.2, 0.9, -0.4, 0.1];
        let w = store.add("w", 2, 3, rng_vals.clone());
        rng_vals.truncate(3);
        let b = store.add("b", 1, 3, rng_vals);

        let mut run = |s: &ParamStore| -> (f64, Vec<Option<Vec<f64>>>) {
            let mut t = Tape::new(s);
            let x = t.constant(vec![0.5, -1.5], 1, 2);
            let wp = t.param(w);
            let bp = t.param(b);
            let h = t.affine(x, wp, bp);
            let h = t.tanh(h);
            let h = t.sigmoid(h);
            let sm = t.softmax_rows(h);
            let ln = t.layer_norm_rows(sm);
            let nm = t.normalize_rows(ln);
            let l = t.sum_all(nm);
            let sq = t.mul(l, l);
            let grads = t.backward(sq);
            (t.scalar_value(sq), grads)
        };
        let (_, grads) = run(&store);
        let gw = grads[w.0].clone().unwrap();
        let gb = grads[b.0].clone().unwrap();
        fd_check(&mut store, w, &mut |s| run(s).0, &gw);
        fd_check(&mut store, b, &mut |s| run(s).0, &gb);
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(vec![1.0, 99.0, 99.0, 2.0, 2.0, 99.0, 1.0, 1.0, 1.0], 3, 3);
        let s = t.causal_softmax_rows(a);
        let v = t.value(s);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-12 && (v[4] - 0.5).abs() < 1e-12);
        assert_eq!(v[5], 0.0);
        assert!((v[6] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = t.constant(vec![0.0, 0.0, 0.0, 0.0], 1, 4);
        let ce = t.cross_entropy_logits(logits, 2);
        assert!((t.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_through_attention_shapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", 4, 4, (0..16).map(|i| (i as f64) * 0.07 - 0.5).collect());
        let mut run = |s: &ParamStore| -> (f64, Vec<Option<Vec<f64>>>) {
            let mut t = Tape::new(s);
            let x = t.constant((0..12).map(|i| (i as f64) * 0.11 - 0.6).collect(), 3, 4);
            let wp = t.param(w);
            let q = t.matmul(x, wp);
            let scores = t.matmul_trans_b(q, x);
            let scaled = t.scale(scores, 0.5);
            let probs = t.causal_softmax_rows(scaled);
            let ctx = t.matmul(probs, x);
            let flat = t.flatten_row(ctx);
            let rot = t.rotate_half_cols(flat);
            let l = t.sum_all(rot);
            let g = t.backward(l);
            (t.scalar_value(l), g)
        };
        let (_, grads) = run(&store);
        let gw = grads[w.0].clone().unwrap();
        fd_check(&mut store, w, &mut |s| run(s).0, &gw);
    }

    #[test]
    fn gather_and_slice_backward() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 5, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let mut run = |s: &ParamStore| -> (f64, Vec<Option<Vec<f64>>>) {
            let mut t = Tape::new(s);
            let wp = t.param(w);
            let g1 = t.gather_cols(wp, &[4, 0, 4]);
            let s1 = t.slice_cols(wp, 1, 3);
            let e = t.exp(s1);
            let both = t.concat_cols(&[g1, e]);
            let l = t.sum_all(both);
            let gr = t.backward(l);
            (t.scalar_value(l), gr)
        };
        let (_, grads) = run(&store);
        let gw = grads[w.0].clone().unwrap();
        // gather puts 2.0 on index 4, 1.0 on index 0; exp on 1..4.
        assert!((gw[0] - 1.0).abs() < 1e-12);
        assert!((gw[4] - 2.0).abs() < 1e-12);
        fd_check(&mut store, w, &mut |s| run(s).0, &gw);
    }

    #[test]
    fn param_row_routes_gradient_to_single_row() {
        let mut store = ParamStore::new();
        let table = store.add("table", 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut t = Tape::new(&store);
        let r = t.param_row(table, 1);
        let l = t.sum_all(r);
        let grads = t.backward(l);
        assert_eq!(grads[table.0].as_deref().unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
