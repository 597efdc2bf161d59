//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound by name with [`Graph::param`]; values bound with
//! [`Graph::constant`] (or parameters bound as frozen) never receive a
//! gradient, which is how stop-gradient and freezing are expressed.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! every trainable parameter that the loss depends on.
//!
//! Shape errors inside the graph are programming errors and panic; the
//! public model and loss functions validate their inputs before building.

use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Result};
use crate::tensor::{gemm_acc, matmul, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Recip(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Assemble { visible: Var, visible_idx: Vec<usize>, token: Var, masked_idx: Vec<usize> },
    SumAll(Var),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Diag(Var),
    BceWithLogits { x: Var, targets: Matrix },
    SoftmaxCrossEntropy { x: Var, labels: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Matrix) {
        self.by_name.insert(name, grad);
    }

    /// Drops every gradient whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.by_name.retain(|k, _| !k.starts_with(prefix));
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// same node, so a parameter shared across samples accumulates one
    /// gradient. Frozen parameters behave like constants.
    pub fn param(&mut self, name: &str, value: &Matrix, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        if trainable {
            self.param_names.push((v, name.to_string()));
        }
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, ta, b, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1 × C]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(x), self.value(row), |a, b| a + b);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` by a `[1 × C]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(x), self.value(row), |a, b| a * b);
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Multiplies `x` by a `[1 × 1]` node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).to_scalar();
        let value = self.value(x).scale(sv);
        self.push(value, Op::MulScalarVar(x, s), &[x, s])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / v);
        self.push(value, Op::Recip(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push(value, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Rows of `x` in `idx` order; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select_rows(idx);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Scatters `visible` rows to `visible_idx` and the `[1 × C]` `token`
    /// row to every position in `masked_idx`.
    pub fn assemble(
        &mut self,
        visible: Var,
        visible_idx: &[usize],
        token: Var,
        masked_idx: &[usize],
    ) -> Var {
        let vis = self.value(visible);
        let tok = self.value(token);
        let n = visible_idx.len() + masked_idx.len();
        let mut out = Matrix::zeros(n, tok.cols());
        for (src, &dst) in visible_idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(vis.row(src));
        }
        for &dst in masked_idx {
            out.row_mut(dst).copy_from_slice(tok.row(0));
        }
        self.push(
            out,
            Op::Assemble {
                visible,
                visible_idx: visible_idx.to_vec(),
                token,
                masked_idx: masked_idx.to_vec(),
            },
            &[visible, token],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a `[1 × C]` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let value = out.scale(1.0 / xv.rows() as f64);
        self.push(value, Op::MeanRows(x), &[x])
    }

    /// Scales each row to unit Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms = xv.row_norms();
        let mut out = xv.clone();
        for (r, &n) in norms.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Diagonal of a square matrix as a `[1 × N]` row.
    pub fn diag(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), xv.cols(), "diag of non-square matrix");
        let d: Vec<f64> = (0..xv.rows()).map(|i| xv.get(i, i)).collect();
        self.push(Matrix::row_vector(&d), Op::Diag(x), &[x])
    }

    /// Mean binary cross-entropy of sigmoid(`x`) against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), targets.shape(), "bce target shape mismatch");
        let total: f64 = xv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Matrix::scalar(total / xv.len() as f64);
        self.push(
            value,
            Op::BceWithLogits {
                x,
                targets: targets.clone(),
            },
            &[x],
        )
    }

    /// Mean softmax cross-entropy of rows of `x` against class `labels`.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: &[usize]) -> Var {
        let ls = log_softmax_rows(self.value(x));
        assert_eq!(ls.rows(), labels.len(), "label count mismatch");
        let total: f64 = labels.iter().enumerate().map(|(r, &l)| -ls.get(r, l)).sum();
        let value = Matrix::scalar(total / labels.len() as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable parameter bound on this graph
    /// that the loss depends on; parameters outside the loss's ancestry get
    /// no entry. A loss that depends on no trainable parameter is rejected.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return invalid("backward requires a scalar loss");
        }
        if !self.requires_grad(loss) {
            return invalid("loss is detached from every trainable parameter");
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (v, name) in &self.param_names {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    out.by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    // C = op(A) op(B); dA = dC op(B)^T (transposed back if ta)
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    if *ta {
                        gemm_acc(1.0, bv, *tb, g, true, &mut da);
                    } else {
                        gemm_acc(1.0, g, false, bv, !*tb, &mut da);
                    }
                    accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm_acc(1.0, g, true, av, *ta, &mut db);
                    } else {
                        gemm_acc(1.0, av, !*ta, g, false, &mut db);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || g.clone());
                self.acc_if(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc_if(grads, *a, || g.zip_map(self.value(*b), |x, y| x * y));
                self.acc_if(grads, *b, || g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                self.acc_if(grads, *x, || g.clone());
                self.acc_if(grads, *row, || column_sums(g));
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                self.acc_if(grads, *x, || broadcast_rows(g, rv, |a, b| a * b));
                self.acc_if(grads, *row, || column_sums(&g.zip_map(self.value(*x), |a, b| a * b)));
            }
            Op::Scale(x, s) => self.acc_if(grads, *x, || g.scale(*s)),
            Op::AddScalar(x) => self.acc_if(grads, *x, || g.clone()),
            Op::MulScalarVar(x, s) => {
                let sv = self.value(*s).to_scalar();
                self.acc_if(grads, *x, || g.scale(sv));
                self.acc_if(grads, *s, || {
                    let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    Matrix::scalar(d)
                });
            }
            Op::Recip(x) => {
                self.acc_if(grads, *x, || g.zip_map(self.value(*x), |dy, v| -dy / (v * v)));
            }
            Op::LayerNorm { x, inv_std } => {
                self.acc_if(grads, *x, || {
                    let cols = y.cols() as f64;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mean_g = gr.iter().sum::<f64>() / cols;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    dx
                });
            }
            Op::Gelu(x) => {
                self.acc_if(grads, *x, || g.zip_map(self.value(*x), |dy, v| dy * gelu(v).1));
            }
            Op::SoftmaxRows(x) => {
                self.acc_if(grads, *x, || {
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    dx
                });
            }
            Op::LogSoftmaxRows(x) => {
                self.acc_if(grads, *x, || {
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = gv - yv.exp() * total;
                        }
                    }
                    dx
                });
            }
            Op::Transpose(x) => self.acc_if(grads, *x, || g.transpose()),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    self.acc_if(grads, p, || g.select_rows(&idx));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    self.acc_if(grads, p, || {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        d
                    });
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                self.acc_if(grads, *x, || {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    d
                });
            }
            Op::GatherRows { x, idx } => {
                self.acc_if(grads, *x, || {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (src, &dst) in idx.iter().enumerate() {
                        for (a, b) in d.row_mut(dst).iter_mut().zip(g.row(src)) {
                            *a += b;
                        }
                    }
                    d
                });
            }
            Op::Assemble {
                visible,
                visible_idx,
                token,
                masked_idx,
            } => {
                self.acc_if(grads, *visible, || g.select_rows(visible_idx));
                self.acc_if(grads, *token, || {
                    let mut d = Matrix::zeros(1, g.cols());
                    for &i in masked_idx {
                        for (a, b) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    d
                });
            }
            Op::SumAll(x) => {
                let gv = g.to_scalar();
                self.acc_if(grads, *x, || {
                    let xv = self.value(*x);
                    Matrix::filled(xv.rows(), xv.cols(), gv)
                });
            }
            Op::MeanRows(x) => {
                self.acc_if(grads, *x, || {
                    let xv = self.value(*x);
                    let inv = 1.0 / xv.rows() as f64;
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (a, b) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                            *a = b * inv;
                        }
                    }
                    d
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                self.acc_if(grads, *x, || {
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * dot) / norms[r];
                        }
                    }
                    dx
                });
            }
            Op::Diag(x) => {
                self.acc_if(grads, *x, || {
                    let n = g.cols();
                    let mut d = Matrix::zeros(n, n);
                    for k in 0..n {
                        d.set(k, k, g.get(0, k));
                    }
                    d
                });
            }
            Op::BceWithLogits { x, targets } => {
                let gv = g.to_scalar();
                self.acc_if(grads, *x, || {
                    let xv = self.value(*x);
                    let n = xv.len() as f64;
                    xv.zip_map(targets, |z, t| gv * (sigmoid(z) - t) / n)
                });
            }
            Op::SoftmaxCrossEntropy { x, labels } => {
                let gv = g.to_scalar();
                self.acc_if(grads, *x, || {
                    let mut d = softmax_rows(self.value(*x));
                    let n = labels.len() as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        let v = d.get(r, l);
                        d.set(r, l, v - 1.0);
                    }
                    d.scale(gv / n)
                });
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce() -> Matrix) {
        if self.requires_grad(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot => *slot = Some(g),
    }
}

fn broadcast_rows(x: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(x.cols(), row.cols(), "broadcast column mismatch");
    let mut out = x.clone();
    for r in 0..x.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.row(0)) {
            *o = f(*o, b);
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

/// Numerically stable row softmax (max subtraction).
pub fn softmax_rows(x: &Matrix) -> Matrix {
    log_softmax_rows(x).map(f64::exp)
}

pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn gelu_value(x: f64) -> f64 {
    gelu(x).0
}
