//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a graph per
//! batch item is cheap. [`Graph::backward`] walks the tape in reverse and
//! returns per-node gradients, which can then be folded into [`ParamGrads`].

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Matrix};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    KeepRows { x: Var, keep: usize },
    StraightThrough(Var),
    MseLoss { pred: Var, target: Matrix },
    SqDistSum { pred: Var, target: Matrix },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
    Sum(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of one scalar w.r.t. every node of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf (no gradient flows into it).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// A leaf that records its gradient; used for inputs under test.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()), "linear bias shape");
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.as_slice());
            }
            gemm(1.0, MatRef::new(xv), MatRef::new(wv), 1.0, MatMut::new(&mut out));
        } else {
            gemm(1.0, MatRef::new(xv), MatRef::new(wv), 0.0, MatMut::new(&mut out));
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, xv.cols()), "add_row shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, xv.cols()), "mul_row shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddConst(x), rg)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / libm::sqrt(var + LN_EPS);
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let inner = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + libm::tanh(inner))
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Multi-head scaled dot-product attention. `q` is `Sq × d`, `k` and
    /// `v` are `Sk × d`; heads split the columns evenly. With `causal`,
    /// query `i` attends to keys `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d) = qv.shape();
        let sk = kv.rows();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.shape(), (sk, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide model width");
        assert!(!causal || sq == sk, "causal attention needs square scores");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Matrix::zeros(sq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = Matrix::zeros(sq, sk);
            gemm(
                scale,
                MatRef::cols_of(qv, h * dh, dh),
                MatRef::cols_of(kv, h * dh, dh).t(),
                0.0,
                MatMut::new(&mut p),
            );
            for i in 0..sq {
                let row = p.row_mut(i);
                if causal {
                    for s in &mut row[i + 1..] {
                        *s = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            gemm(1.0, MatRef::new(&p), MatRef::cols_of(vv, h * dh, dh), 0.0, MatMut::cols_of(&mut out, h * dh, dh));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat rows");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Keeps rows `0..keep` and zeroes the rest.
    pub fn keep_rows(&mut self, x: Var, keep: usize) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        let keep = keep.min(out.rows());
        out.as_mut_slice()[keep * cols..].fill(0.0);
        let rg = self.rg(x);
        self.push(out, Op::KeepRows { x, keep }, rg)
    }

    /// Forward value `value`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, value: Matrix) -> Var {
        assert_eq!(self.value(x).shape(), value.shape(), "straight-through shape");
        let rg = self.rg(x);
        self.push(value, Op::StraightThrough(x), rg)
    }

    /// Mean of squared differences against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Matrix) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape");
        let sum: f64 = pv.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Matrix::filled(1, 1, sum / pv.len() as f64);
        let rg = self.rg(pred);
        self.push(out, Op::MseLoss { pred, target: target.clone() }, rg)
    }

    /// Sum of squared differences against a constant target.
    pub fn sq_dist_sum(&mut self, pred: Var, target: &Matrix) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "sq_dist shape");
        let sum: f64 = pv.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Matrix::filled(1, 1, sum);
        let rg = self.rg(pred);
        self.push(out, Op::SqDistSum { pred, target: target.clone() }, rg)
    }

    /// Weighted mean negative log-likelihood of `targets` under row-softmax
    /// of `logits`. Zero total weight yields a loss of exactly 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross-entropy targets");
        assert_eq!(lv.rows(), weights.len(), "cross-entropy weights");
        let mut probs = lv.clone();
        let total_w: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            if w != 0.0 {
                loss += w * (lse - row[t]);
            }
            for p in row.iter_mut() {
                *p = libm::exp(*p - lse);
            }
        }
        let value = if total_w > 0.0 { loss / total_w } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Matrix::filled(1, 1, value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Gradients of the scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    /// Adds every parameter gradient in `grads` into `acc`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut ParamGrads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                acc.accumulate(*id, g);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(1.0, MatRef::new(dy), MatRef::new(bv).t(), 0.0, MatMut::new(&mut da));
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(1.0, MatRef::new(av).t(), MatRef::new(dy), 0.0, MatMut::new(&mut db));
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    gemm(1.0, MatRef::new(dy), MatRef::new(wv).t(), 0.0, MatMut::new(&mut dx));
                    self.acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    gemm(1.0, MatRef::new(xv).t(), MatRef::new(dy), 0.0, MatMut::new(&mut dw));
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc(grads, *b, column_sums(dy));
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, dy.zip_map(bv, |g, y| g * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, dy.zip_map(av, |g, x| g * x));
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, dy.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, column_sums(dy));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        for (g, s) in dx.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *g *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*row) {
                    let mut dr = Matrix::zeros(1, rv.cols());
                    for r in 0..dy.rows() {
                        for ((acc, g), v) in dr.as_mut_slice().iter_mut().zip(dy.row(r)).zip(xv.row(r)) {
                            *acc += g * v;
                        }
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, dy.map(|g| g * s)),
            Op::AddConst(x) => self.acc(grads, *x, dy.clone()),
            Op::LayerNorm { x, rstd } => {
                let y = out.expect("layer norm output");
                let cols = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cols;
                    for ((d, g), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = rstd[r] * (g - mean_g - yv * mean_gy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    dy.zip_map(xv, |g, v| {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let th = libm::tanh(inner);
                        let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner)
                    }),
                );
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    dy.zip_map(xv, |g, v| {
                        let s = sigmoid(v);
                        g * (s * (1.0 + v * (1.0 - s)))
                    }),
                );
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, dy, grads);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        self.acc(grads, p, dy.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    dx.as_mut_slice()[start * c..start * c + dy.len()].copy_from_slice(dy.as_slice());
                    self.acc(grads, *x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    self.acc(grads, *table, dt);
                }
            }
            Op::KeepRows { x, keep } => {
                let mut dx = dy.clone();
                let cols = dx.cols();
                dx.as_mut_slice()[keep * cols..].fill(0.0);
                self.acc(grads, *x, dx);
            }
            Op::StraightThrough(x) => self.acc(grads, *x, dy.clone()),
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred);
                let s = 2.0 * dy.as_slice()[0] / pv.len() as f64;
                self.acc(grads, *pred, pv.zip_map(target, |p, t| s * (p - t)));
            }
            Op::SqDistSum { pred, target } => {
                let pv = self.value(*pred);
                let s = 2.0 * dy.as_slice()[0];
                self.acc(grads, *pred, pv.zip_map(target, |p, t| s * (p - t)));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let total_w: f64 = weights.iter().sum();
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                if total_w > 0.0 {
                    let g = dy.as_slice()[0] / total_w;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = dl.row_mut(r);
                        for (d, p) in row.iter_mut().zip(probs.row(r)) {
                            *d = g * w * p;
                        }
                        row[t] -= g * w;
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Matrix::filled(xv.rows(), xv.cols(), dy.as_slice()[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Matrix],
        dy: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d) = qv.shape();
        let sk = kv.rows();
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = Matrix::zeros(sq, d);
        let mut dk = Matrix::zeros(sk, d);
        let mut dv = Matrix::zeros(sk, d);
        let mut dp = Matrix::zeros(sq, sk);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            // dV_h = P^T dO_h
            gemm(1.0, MatRef::new(p).t(), MatRef::cols_of(dy, off, dh), 0.0, MatMut::cols_of(&mut dv, off, dh));
            // dP = dO_h V_h^T
            gemm(1.0, MatRef::cols_of(dy, off, dh), MatRef::cols_of(vv, off, dh).t(), 0.0, MatMut::new(&mut dp));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for r in 0..sq {
                let (pr, dr) = (p.row(r), dp.row_mut(r));
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(scale, MatRef::new(&dp), MatRef::cols_of(kv, off, dh), 0.0, MatMut::cols_of(&mut dq, off, dh));
            gemm(scale, MatRef::new(&dp).t(), MatRef::cols_of(qv, off, dh), 0.0, MatMut::cols_of(&mut dk, off, dh));
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `ln Σ exp(x)`, stable; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}
