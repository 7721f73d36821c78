//! Tape-based reverse-mode automatic differentiation over [`Mat`].
//!
//! Every operation appends a node holding its forward value; nodes are only
//! ever appended, so the tape order is a topological order and the backward
//! pass is a single reverse sweep.

use std::collections::HashMap;

use crate::tensor::{dot, Mat};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MaskedSoftmax(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        target: usize,
        first_valid: usize,
        probs: Vec<f64>,
    },
    SqDist(Var, Var),
    L2NormalizeRows(Var, Vec<f64>),
    TriView {
        sim: Var,
        terms: Vec<ContrastTerm>,
    },
    Sum(Vec<Var>),
}

/// One anchor/positive term of the tri-view objective, with its softmax cache.
struct ContrastTerm {
    anchor: usize,
    positive: usize,
    /// Column indices entering the denominator; `cols[0]` is the positive.
    cols: Vec<usize>,
    probs: Vec<f64>,
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the parameter store.
    value: Option<Mat>,
    op: Op,
}

/// Records a computation for one backward pass. Parameter values are borrowed
/// from the store passed to [`Tape::with_params`], never copied.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: &'p [Mat],
    params: HashMap<usize, Var>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(store: &'p [Mat]) -> Self {
        Tape {
            nodes: Vec::new(),
            store,
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => &self.store[*id],
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers parameter `id` of the store. Repeated calls with the same id
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        assert!(id < self.store.len(), "parameter {id} not in store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(vx.cols, vr.cols);
        let mut out = vx.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let mut out = Mat::zeros(idx.len(), vx.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(j));
        }
        self.push(out, Op::Gather(x, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let vx = self.value(x);
        let mut out = Mat::zeros(vx.rows, width);
        for r in 0..vx.rows {
            out.row_mut(r)
                .copy_from_slice(&vx.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Row-wise layer normalization with learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Mat {
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|&v| gelu(v)).collect(),
        };
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax restricted to entries where `allowed` is true. Rows
    /// with no allowed entry produce all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: Vec<bool>) -> Var {
        let vx = self.value(x);
        assert_eq!(allowed.len(), vx.len());
        let mut out = Mat::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let base = r * vx.cols;
            let row = vx.row(r);
            let mask = &allowed[base..base + vx.cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out_row = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..row.len() {
                if mask[c] {
                    let e = (row[c] - max).exp();
                    out_row[c] = e;
                    total += e;
                }
            }
            for o in out_row.iter_mut() {
                *o /= total;
            }
        }
        self.push(out, Op::MaskedSoftmax(x, allowed))
    }

    /// Cross-entropy of a `1 x n` logit row against `target`, with columns
    /// below `first_valid` excluded from the candidate set.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, first_valid: usize) -> Var {
        let row = &self.value(logits).data;
        assert!(target >= first_valid && target < row.len(), "target outside candidates");
        let (loss, probs) = log_softmax_ce(&row[first_valid..], target - first_valid);
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                target,
                first_valid,
                probs,
            },
        )
    }

    /// Squared Euclidean distance `||a - b||^2` as a `1 x 1` node.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let d: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| (x - y).powi(2)).sum();
        self.push(Mat::filled(1, 1, d), Op::SqDist(a, b))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let n = dot(vx.row(r), vx.row(r)).sqrt().max(NORM_FLOOR);
            for o in out.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows(x, norms))
    }

    /// Tri-view contrastive objective over a `3B x 3B` similarity matrix whose
    /// rows/columns are ordered `[view0 users.., view1 users.., view2 users..]`.
    ///
    /// For each user and each ordered pair of distinct views, the positive is
    /// the other view of the same user and the negatives are all views of all
    /// other users. Returns the mean over the `6B` terms.
    pub fn tri_view_contrast(&mut self, sim: Var, batch: usize) -> Var {
        let s = self.value(sim);
        assert_eq!(s.shape(), (3 * batch, 3 * batch));
        let mut terms = Vec::with_capacity(6 * batch);
        let mut total = 0.0;
        for i in 0..batch {
            for a in 0..3 {
                for b in 0..3 {
                    if a == b {
                        continue;
                    }
                    let anchor = a * batch + i;
                    let positive = b * batch + i;
                    let mut cols = vec![positive];
                    for v in 0..3 {
                        for j in 0..batch {
                            if j != i {
                                cols.push(v * batch + j);
                            }
                        }
                    }
                    let logits: Vec<f64> = cols.iter().map(|&c| s.at(anchor, c)).collect();
                    let (loss, probs) = log_softmax_ce(&logits, 0);
                    total += loss;
                    terms.push(ContrastTerm {
                        anchor,
                        positive,
                        cols,
                        probs,
                    });
                }
            }
        }
        let mean = total / terms.len() as f64;
        self.push(Mat::filled(1, 1, mean), Op::TriView { sim, terms })
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(out, Op::Sum(parts))
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(x, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g.clone());
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(vb));
                    acc(&mut grads, *b, va.t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(vb));
                    acc(&mut grads, *b, g.t_matmul(va));
                }
                Op::Gather(x, idx_list) => {
                    let vx = self.value(*x);
                    let mut gx = Mat::zeros(vx.rows, vx.cols);
                    for (i, &j) in idx_list.iter().enumerate() {
                        for (o, v) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let data = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        acc(&mut grads, p, Mat::from_vec(rows, g.cols, data));
                        offset += rows;
                    }
                }
                Op::SliceCols(x, start) => {
                    let vx = self.value(*x);
                    let mut gx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.value(*gain).data;
                    let (rows, cols) = xhat.shape();
                    let n = cols as f64;
                    let mut g_gain = Mat::zeros(1, cols);
                    let mut g_bias = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            g_gain.data[c] += gr[c] * hr[c];
                            g_bias.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, hr);
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] / n * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(&mut grads, *gain, g_gain);
                    acc(&mut grads, *bias, g_bias);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let data = vx
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| gv * gelu_grad(v))
                        .collect();
                    acc(&mut grads, *x, Mat::from_vec(vx.rows, vx.cols, data));
                }
                Op::MaskedSoftmax(x, allowed) => {
                    let y = self.value(Var(idx));
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        let base = r * y.cols;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            if allowed[base + c] {
                                *o = yr[c] * (gr[c] - inner);
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    first_valid,
                    probs,
                } => {
                    let n = self.value(*logits).cols;
                    let s = g.data[0];
                    let mut gl = Mat::zeros(1, n);
                    for (k, p) in probs.iter().enumerate() {
                        let col = first_valid + k;
                        let ind = if col == *target { 1.0 } else { 0.0 };
                        gl.data[col] = s * (p - ind);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::SqDist(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let s = g.data[0];
                    let diff: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| 2.0 * s * (x - y))
                        .collect();
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    acc(&mut grads, *a, Mat::from_vec(va.rows, va.cols, diff));
                    acc(&mut grads, *b, Mat::from_vec(vb.rows, vb.cols, neg));
                }
                Op::L2NormalizeRows(x, norms) => {
                    let y = self.value(Var(idx));
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * inner) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::TriView { sim, terms } => {
                    let s = self.value(*sim);
                    let scale = g.data[0] / terms.len() as f64;
                    let mut gs = Mat::zeros(s.rows, s.cols);
                    for term in terms {
                        for (k, (&col, &p)) in term.cols.iter().zip(&term.probs).enumerate() {
                            let ind = if k == 0 { 1.0 } else { 0.0 };
                            *gs.at_mut(term.anchor, col) += scale * (p - ind);
                        }
                        debug_assert_eq!(term.cols[0], term.positive);
                    }
                    acc(&mut grads, *sim, gs);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Gradients { grads }
    }

    /// Parameter ids registered on this tape with their nodes.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Returns `(-log softmax(logits)[target], softmax(logits))` computed with
/// max subtraction.
fn log_softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[target] - max);
    let probs = exps.into_iter().map(|e| e / total).collect();
    (loss, probs)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
