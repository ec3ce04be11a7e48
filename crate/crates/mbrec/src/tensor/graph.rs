//! Reverse-mode differentiation over a define-by-run op graph.
//!
//! Ops are recorded append-only, so node ids are already a topological
//! order; the backward pass walks them in reverse and accumulates
//! vector-Jacobian products. Parameters are named leaves; every parameter
//! reachable from the loss receives a gradient of identical shape, and
//! unreachable parameters report zeros.
//!
//! A graph is single-writer. Independent graphs may live on separate
//! threads; nothing here is shared mutably.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::dense::{mm_nn, mm_nt, mm_tn};
use super::{SparseMatrix, Tensor, ZERO_ROW_EPS};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("loss value is not finite: {value}")]
    NonFiniteLoss { value: f64 },
}

#[derive(Debug)]
enum Op {
    /// Constant input or named parameter.
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    /// Constant sparse matrix times a dense node.
    SpMatMul(Arc<SparseMatrix>, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Scalar node times tensor node; both receive gradients.
    ScaleBy { scalar: NodeId, tensor: NodeId },
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    /// Leaky rectifier with a learnable scalar slope on the negative side.
    PRelu { input: NodeId, slope: NodeId },
    /// Row-wise softmax over the last axis of a matrix.
    SoftmaxRows(NodeId),
    /// Row-wise L2 normalization; zero rows stay zero and get zero gradient.
    NormalizeRows(NodeId),
    /// Per-row dot product of two equally shaped matrices -> vector.
    RowDot(NodeId, NodeId),
    /// Sum along each row of a matrix -> vector.
    RowSum(NodeId),
    /// Full dot product of two equally shaped tensors -> scalar.
    Dot(NodeId, NodeId),
    /// Concatenate along the feature (column) axis.
    ConcatCols(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, len: usize },
    /// Concatenate along the row axis.
    StackRows(Vec<NodeId>),
    /// Select rows by index; backward scatter-adds.
    GatherRows { input: NodeId, indices: Vec<usize> },
    /// Broadcast-multiply each row of a matrix by a per-row coefficient.
    ColMul { mat: NodeId, col: NodeId },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The op graph: values are computed eagerly as nodes are added, and the
/// recorded structure drives [`Graph::grad`].
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new() }
    }

    // Non-finite values are allowed to flow here; `grad` rejects a
    // non-finite loss and the trainer reports divergence with context.
    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// A constant leaf: participates in forward values but never gets a
    /// gradient reported.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        let id = self.push(Op::Leaf, t);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Mul(a, b), t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul inner dims: {:?} · {:?}", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nn(ta.data(), tb.data(), out.data_mut(), m, k, n);
        self.push(Op::MatMul(a, b), out)
    }

    /// a[m×k] · b[n×k]ᵀ -> [m×n]
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul_nt inner dims: {:?} · {:?}ᵀ", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nt(ta.data(), tb.data(), out.data_mut(), m, k, n);
        self.push(Op::MatMulNT(a, b), out)
    }

    pub fn spmm(&mut self, s: Arc<SparseMatrix>, x: NodeId) -> NodeId {
        let out = s.mul_dense(&self.nodes[x].value);
        self.push(Op::SpMatMul(s, x), out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.nodes[x].value.map(|v| c * v);
        self.push(Op::Scale(x, c), t)
    }

    pub fn scale_by(&mut self, scalar: NodeId, tensor: NodeId) -> NodeId {
        let s = self.nodes[scalar].value.item();
        let t = self.nodes[tensor].value.map(|v| s * v);
        self.push(Op::ScaleBy { scalar, tensor }, t)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(f64::exp);
        self.push(Op::Exp(x), t)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(f64::ln);
        self.push(Op::Log(x), t)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(f64::sqrt);
        self.push(Op::Sqrt(x), t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(sigmoid);
        self.push(Op::Sigmoid(x), t)
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> NodeId {
        let s = self.nodes[slope].value.item();
        let t = self.nodes[x].value.map(|v| if v >= 0.0 { v } else { s * v });
        self.push(Op::PRelu { input: x, slope }, t)
    }

    /// Softmax along each row, with max subtraction for overflow safety.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        assert_eq!(tx.shape().len(), 2, "softmax_rows wants a matrix");
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..n {
            let row = tx.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data_mut()[i * m..(i + 1) * m];
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                z += e;
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let t = normalize_rows_value(&self.nodes[x].value);
        self.push(Op::NormalizeRows(x), t)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "row_dot shape mismatch");
        let d = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(ra, rb)| dot_slice(ra, rb))
            .collect();
        self.push(Op::RowDot(a, b), Tensor::vector(out))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x].value;
        let (n, m) = (tx.rows(), tx.cols());
        let out = (0..n).map(|i| tx.data()[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Op::RowSum(x), Tensor::vector(out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.numel(), tb.numel(), "dot length mismatch");
        let v = dot_slice(ta.data(), tb.data());
        self.push(Op::Dot(a, b), Tensor::scalar(v))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let n = self.nodes[xs[0]].value.rows();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&id| {
                let t = &self.nodes[id].value;
                assert_eq!(t.rows(), n, "concat_cols row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![n, total]);
        let od = out.data_mut();
        let mut off = 0;
        for (&id, &w) in xs.iter().zip(&widths) {
            let t = &self.nodes[id].value;
            for i in 0..n {
                od[i * total + off..i * total + off + w].copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Op::ConcatCols(xs.to_vec()), out)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = &self.nodes[x].value;
        let (n, m) = (tx.rows(), tx.cols());
        assert!(start + len <= m, "slice_cols {start}+{len} beyond width {m}");
        let mut out = Tensor::zeros(vec![n, len]);
        let od = out.data_mut();
        for i in 0..n {
            od[i * len..(i + 1) * len].copy_from_slice(&tx.data()[i * m + start..i * m + start + len]);
        }
        self.push(Op::SliceCols { input: x, start, len }, out)
    }

    pub fn stack_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "stack_rows of nothing");
        let d = self.nodes[xs[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in xs {
            let t = &self.nodes[id].value;
            assert_eq!(t.cols(), d, "stack_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Op::StackRows(xs.to_vec()), Tensor::matrix(rows, d, data))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let tx = &self.nodes[x].value;
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            assert!(i < n, "gather_rows index {i} out of {n}");
            data.extend_from_slice(&tx.data()[i * d..(i + 1) * d]);
        }
        let out = if tx.shape().len() == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(indices.len(), d, data)
        };
        self.push(Op::GatherRows { input: x, indices }, out)
    }

    pub fn col_mul(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let (tm, tc) = (&self.nodes[mat].value, &self.nodes[col].value);
        let (n, d) = (tm.rows(), tm.cols());
        assert_eq!(tc.numel(), n, "col_mul coefficient length");
        let mut out = Tensor::zeros(vec![n, d]);
        let od = out.data_mut();
        for i in 0..n {
            let c = tc.data()[i];
            for j in 0..d {
                od[i * d + j] = c * tm.data()[i * d + j];
            }
        }
        self.push(Op::ColMul { mat, col }, out)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(v))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// parameter leaf. Parameters the loss does not reach get zeros.
    pub fn grad(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = &self.nodes[loss].value;
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss { numel: lv.numel() });
        }
        if !lv.item().is_finite() {
            return Err(DiffError::NonFiniteLoss { value: lv.item() });
        }

        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(d_out) = adj[id].take() else { continue };
            self.backward_op(id, &d_out, &mut adj);
            adj[id] = Some(d_out);
        }

        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = match &adj[id] {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.nodes[id].value.shape().to_vec()),
            };
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn backward_op(&self, id: NodeId, d_out: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, self.shape_of(*a), d_out.data());
                accumulate(adj, *b, self.shape_of(*b), d_out.data());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, self.shape_of(*a), d_out.data());
                let neg: Vec<f64> = d_out.data().iter().map(|v| -v).collect();
                accumulate(adj, *b, self.shape_of(*b), &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    d_out.data().iter().zip(self.nodes[*b].value.data()).map(|(d, y)| d * y).collect();
                let db: Vec<f64> =
                    d_out.data().iter().zip(self.nodes[*a].value.data()).map(|(d, x)| d * x).collect();
                accumulate(adj, *a, self.shape_of(*a), &da);
                accumulate(adj, *b, self.shape_of(*b), &db);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                // d_A = d_C · Bᵀ
                let mut da = vec![0.0; m * k];
                mm_nt(d_out.data(), tb.data(), &mut da, m, n, k);
                accumulate(adj, *a, self.shape_of(*a), &da);
                // d_B = Aᵀ · d_C
                let mut db = vec![0.0; k * n];
                mm_tn(ta.data(), d_out.data(), &mut db, k, m, n);
                accumulate(adj, *b, self.shape_of(*b), &db);
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                // C = A·Bᵀ, so d_A = d_C·B and d_B = d_Cᵀ·A
                let mut da = vec![0.0; m * k];
                mm_nn(d_out.data(), tb.data(), &mut da, m, n, k);
                accumulate(adj, *a, self.shape_of(*a), &da);
                let mut db = vec![0.0; n * k];
                mm_tn(d_out.data(), ta.data(), &mut db, n, m, k);
                accumulate(adj, *b, self.shape_of(*b), &db);
            }
            Op::SpMatMul(s, x) => {
                let dx = s.mul_dense_transposed(d_out);
                accumulate(adj, *x, self.shape_of(*x), dx.data());
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = d_out.data().iter().map(|v| c * v).collect();
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::ScaleBy { scalar, tensor } => {
                let s = self.nodes[*scalar].value.item();
                let dt: Vec<f64> = d_out.data().iter().map(|v| s * v).collect();
                accumulate(adj, *tensor, self.shape_of(*tensor), &dt);
                let ds = dot_slice(d_out.data(), self.nodes[*tensor].value.data());
                accumulate(adj, *scalar, self.shape_of(*scalar), &[ds]);
            }
            Op::Exp(x) => {
                let dx: Vec<f64> =
                    d_out.data().iter().zip(self.nodes[id].value.data()).map(|(d, y)| d * y).collect();
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> =
                    d_out.data().iter().zip(self.nodes[*x].value.data()).map(|(d, v)| d / v).collect();
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::Sqrt(x) => {
                let dx: Vec<f64> = d_out
                    .data()
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(d, y)| d / (2.0 * y))
                    .collect();
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = d_out
                    .data()
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::PRelu { input, slope } => {
                let s = self.nodes[*slope].value.item();
                let xv = self.nodes[*input].value.data();
                let mut dx = vec![0.0; xv.len()];
                let mut ds = 0.0;
                for (i, (&d, &x)) in d_out.data().iter().zip(xv).enumerate() {
                    if x >= 0.0 {
                        dx[i] = d;
                    } else {
                        dx[i] = d * s;
                        ds += d * x;
                    }
                }
                accumulate(adj, *input, self.shape_of(*input), &dx);
                accumulate(adj, *slope, self.shape_of(*slope), &[ds]);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let yrow = y.row(i);
                    let drow = &d_out.data()[i * m..(i + 1) * m];
                    let inner = dot_slice(yrow, drow);
                    for j in 0..m {
                        dx[i * m + j] = yrow[j] * (drow[j] - inner);
                    }
                }
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::NormalizeRows(x) => {
                // Per row: d_e = (d_z − z (z·d_z)) / ‖e‖, zero rows get zero.
                let e = &self.nodes[*x].value;
                let z = &self.nodes[id].value;
                let (n, d) = (e.rows(), e.cols());
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let erow = &e.data()[i * d..(i + 1) * d];
                    let norm = dot_slice(erow, erow).sqrt();
                    if norm <= ZERO_ROW_EPS {
                        continue;
                    }
                    let zrow = z.row(i);
                    let drow = &d_out.data()[i * d..(i + 1) * d];
                    let inner = dot_slice(zrow, drow);
                    for j in 0..d {
                        dx[i * d + j] = (drow[j] - zrow[j] * inner) / norm;
                    }
                }
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, d) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for i in 0..n {
                    let g = d_out.data()[i];
                    for j in 0..d {
                        da[i * d + j] = g * tb.data()[i * d + j];
                        db[i * d + j] = g * ta.data()[i * d + j];
                    }
                }
                accumulate(adj, *a, self.shape_of(*a), &da);
                accumulate(adj, *b, self.shape_of(*b), &db);
            }
            Op::RowSum(x) => {
                let tx = &self.nodes[*x].value;
                let (n, m) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let g = d_out.data()[i];
                    for j in 0..m {
                        dx[i * m + j] = g;
                    }
                }
                accumulate(adj, *x, self.shape_of(*x), &dx);
            }
            Op::Dot(a, b) => {
                let g = d_out.item();
                let da: Vec<f64> = self.nodes[*b].value.data().iter().map(|v| g * v).collect();
                let db: Vec<f64> = self.nodes[*a].value.data().iter().map(|v| g * v).collect();
                accumulate(adj, *a, self.shape_of(*a), &da);
                accumulate(adj, *b, self.shape_of(*b), &db);
            }
            Op::ConcatCols(xs) => {
                let n = self.nodes[xs[0]].value.rows();
                let total = self.nodes[id].value.cols();
                let mut off = 0;
                for &xid in xs {
                    let w = self.nodes[xid].value.cols();
                    let mut dx = vec![0.0; n * w];
                    for i in 0..n {
                        dx[i * w..(i + 1) * w]
                            .copy_from_slice(&d_out.data()[i * total + off..i * total + off + w]);
                    }
                    accumulate(adj, xid, self.shape_of(xid), &dx);
                    off += w;
                }
            }
            Op::SliceCols { input, start, len } => {
                let tx = &self.nodes[*input].value;
                let (n, m) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    dx[i * m + start..i * m + start + len]
                        .copy_from_slice(&d_out.data()[i * len..(i + 1) * len]);
                }
                accumulate(adj, *input, self.shape_of(*input), &dx);
            }
            Op::StackRows(xs) => {
                let d = self.nodes[id].value.cols();
                let mut off = 0;
                for &xid in xs {
                    let r = self.nodes[xid].value.rows();
                    let dx = &d_out.data()[off * d..(off + r) * d];
                    accumulate(adj, xid, self.shape_of(xid), dx);
                    off += r;
                }
            }
            Op::GatherRows { input, indices } => {
                let tx = &self.nodes[*input].value;
                let (n, d) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * d];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += d_out.data()[k * d + j];
                    }
                }
                accumulate(adj, *input, self.shape_of(*input), &dx);
            }
            Op::ColMul { mat, col } => {
                let tm = &self.nodes[*mat].value;
                let tc = &self.nodes[*col].value;
                let (n, d) = (tm.rows(), tm.cols());
                let mut dm = vec![0.0; n * d];
                let mut dc = vec![0.0; n];
                for i in 0..n {
                    let c = tc.data()[i];
                    for j in 0..d {
                        let g = d_out.data()[i * d + j];
                        dm[i * d + j] = c * g;
                        dc[i] += tm.data()[i * d + j] * g;
                    }
                }
                accumulate(adj, *mat, self.shape_of(*mat), &dm);
                accumulate(adj, *col, self.shape_of(*col), &dc);
            }
            Op::Sum(x) => {
                let g = d_out.item();
                let n = self.nodes[*x].value.numel();
                accumulate(adj, *x, self.shape_of(*x), &vec![g; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let g = d_out.item() / n as f64;
                accumulate(adj, *x, self.shape_of(*x), &vec![g; n]);
            }
        }
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }
}

/// Gradient accumulation is additive: a node feeding several consumers
/// receives the sum of all path contributions.
fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
    match &mut adj[id] {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            adj[id] = Some(Tensor::new(shape.to_vec(), delta.to_vec()));
        }
    }
}

/// Named parameter gradients from one backward pass.
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn for_param(&self, name: &str) -> &Tensor {
        self.by_name
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_by_name(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise L2 normalization as a plain value op (shared with the graph).
pub fn normalize_rows_value(e: &Tensor) -> Tensor {
    let (n, d) = (e.rows(), e.cols());
    let mut out = Tensor::zeros(e.shape().to_vec());
    for i in 0..n {
        let row = &e.data()[i * d..(i + 1) * d];
        let norm = dot_slice(row, row).sqrt();
        if norm <= ZERO_ROW_EPS {
            continue;
        }
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = row[j] / norm;
        }
    }
    out
}
