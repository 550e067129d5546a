//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! pass. Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape from a scalar root and accumulates parameter gradients into
//! a [`Gradients`] buffer.

use super::params::{Gradients, ParamId, ParamStore};
use super::{matmul_at_into, matmul_bt_into, matmul_into, normalize_row, sigmoid, softmax_row, Tensor};
use crate::error::{Error, Result};

/// Probabilities inside the binary cross-entropy are kept in `[EPS, 1 - EPS]`.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Gather { table: Var, rows: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Scale(Var, f64),
    MaskedSoftmax(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MulConst { x: Var, factor: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    RowDot(Var, Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Bce { pos: Var, neg: Var, dpos: Vec<f64>, dneg: Vec<f64> },
    SymKl { a: Var, b: Var, cols: Vec<usize>, da: Vec<f64>, db: Vec<f64> },
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of `table` selected by index (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index { index: bad, vocab: n });
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(value, Op::Gather { table, rows: rows.to_vec() }, &[table]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let mut v = ta.clone();
        v.add_assign(tb);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`d` vector to every row of an m×d matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.cols() != tb.len() {
            return Err(dim_err("add_row", ta, tb));
        }
        let mut v = ta.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, p) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * p];
        matmul_into(ta.data(), tb.data(), m, k, p, &mut out);
        let v = Tensor::matrix(m, p, out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a` m×k and `b` p×k.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let (m, k, p) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * p];
        matmul_bt_into(ta.data(), tb.data(), m, k, p, &mut out);
        let v = Tensor::matrix(m, p, out)?;
        Ok(self.push(v, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Row-wise softmax where `keep[i * cols + j] == false` excludes an entry.
    /// Rows with nothing kept produce zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let c = t.cols();
        let mut v = Tensor::zeros(t.shape());
        for i in 0..t.rows() {
            softmax_row(t.row(i), Some(&keep[i * c..(i + 1) * c]), v.row_mut(i));
        }
        Ok(self.push(v, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d || d == 0 {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let mut xhat = tx.clone();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            inv_std.push(normalize_row(xhat.row_mut(i), eps));
        }
        let mut v = xhat.clone();
        for i in 0..v.rows() {
            for ((y, g), b) in v.row_mut(i).iter_mut().zip(tg.data()).zip(tb.data()) {
                *y = *y * g + b;
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: xhat.into_data(),
            inv_std,
        };
        Ok(self.push(v, op, &[x, gain, bias]))
    }

    /// Elementwise product with a constant array (dropout masks, padding masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factor.len() != t.len() {
            return Err(Error::Dimension {
                op: "mul_const",
                left: t.shape().to_vec(),
                right: vec![factor.len()],
            });
        }
        let mut v = t.clone();
        v.data_mut().iter_mut().zip(&factor).for_each(|(a, f)| *a *= f);
        Ok(self.push(v, Op::MulConst { x, factor }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(t.rows(), len, out)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), t));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(rows, width, out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Index {
                index: bad,
                vocab: t.rows(),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::matrix(rows.len(), t.cols(), out)?;
        Ok(self.push(v, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Row-wise dot products of two m×d matrices; result m×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("row_dot", ta, tb));
        }
        let out = (0..ta.rows()).map(|i| super::dot(ta.row(i), tb.row(i))).collect();
        let v = Tensor::matrix(ta.rows(), 1, out)?;
        Ok(self.push(v, Op::RowDot(a, b), &[a, b]))
    }

    /// Scalar `Σ weights ⊙ x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: t.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = super::dot(t.data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Weighted binary cross-entropy over positive and negative logits
    /// (both m×1): `Σ_i w_i · [−ln σ(pos_i) − ln(1 − σ(neg_i))]`, with the
    /// probabilities clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, pos: Var, neg: Var, weights: &[f64]) -> Result<Var> {
        let (tp, tn) = (self.value(pos), self.value(neg));
        if tp.len() != tn.len() || tp.len() != weights.len() {
            return Err(dim_err("bce", tp, tn));
        }
        let mut total = 0.0;
        let mut dpos = Vec::with_capacity(weights.len());
        let mut dneg = Vec::with_capacity(weights.len());
        for ((&p, &n), &w) in tp.data().iter().zip(tn.data()).zip(weights) {
            let (lp, gp) = neg_log_sigmoid(p);
            let (ln, gn) = neg_log_sigmoid(-n);
            total += w * (lp + ln);
            dpos.push(w * gp);
            dneg.push(-w * gn);
        }
        let op = Op::Bce { pos, neg, dpos, dneg };
        Ok(self.push(Tensor::scalar(total), op, &[pos, neg]))
    }

    /// `weight · Σ_rows ½[KL(p‖q) + KL(q‖p)]` with `p = softmax(a[row, cols])`
    /// and `q = softmax(b[row, cols])`.
    pub fn sym_kl(&mut self, a: Var, b: Var, cols: &[usize], weight: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("sym_kl", ta, tb));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= ta.cols()) {
            return Err(Error::Index {
                index: bad,
                vocab: ta.cols(),
            });
        }
        let w = cols.len();
        let mut da = Vec::with_capacity(ta.rows() * w);
        let mut db = Vec::with_capacity(ta.rows() * w);
        let mut total = 0.0;
        let (mut la, mut lb) = (vec![0.0; w], vec![0.0; w]);
        for i in 0..ta.rows() {
            let (ra, rb) = (ta.row(i), tb.row(i));
            log_softmax(cols.iter().map(|&c| ra[c]), &mut la);
            log_softmax(cols.iter().map(|&c| rb[c]), &mut lb);
            let mut kpq = 0.0;
            let mut kqp = 0.0;
            for c in 0..w {
                let delta = la[c] - lb[c];
                kpq += la[c].exp() * delta;
                kqp -= lb[c].exp() * delta;
            }
            total += weight * 0.5 * (kpq + kqp);
            for c in 0..w {
                let (p, q) = (la[c].exp(), lb[c].exp());
                let delta = la[c] - lb[c];
                da.push(weight * 0.5 * (p * (delta - kpq) + p - q));
                db.push(weight * 0.5 * (q * (-delta - kqp) + q - p));
            }
        }
        let op = Op::SymKl {
            a,
            b,
            cols: cols.to_vec(),
            da,
            db,
        };
        Ok(self.push(Tensor::scalar(total), op, &[a, b]))
    }

    /// `Σ coef_i · x_i` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut v = Tensor::zeros(self.value(terms[0].0).shape());
        for &(x, c) in terms {
            let t = self.value(x);
            if t.shape() != v.shape() {
                return Err(dim_err("lin_comb", &v, t));
            }
            v.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += c * b);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(v, Op::LinComb(terms.to_vec()), &inputs))
    }

    fn with_slot(&self, local: &mut [Option<Tensor>], ext: &mut Gradients, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &node.value {
            Value::Param(id) => f(ext.grads[id.0].data_mut()),
            Value::Owned(t) => f(local[v.0].get_or_insert_with(|| Tensor::zeros(t.shape())).data_mut()),
        }
    }

    /// Accumulates `∂root/∂param` into `grads` for every parameter reached.
    /// `root` must hold a single element.
    pub fn backward(&self, root: Var, grads: &mut Gradients) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: rv.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut local: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        local[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.value, Value::Param(_)) {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Gather { table, rows } => {
                    let d = g.cols();
                    self.with_slot(&mut local, grads, *table, |s| {
                        for (k, &r) in rows.iter().enumerate() {
                            for (a, b) in s[r * d..(r + 1) * d].iter_mut().zip(&gd[k * d..(k + 1) * d]) {
                                *a += b;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.with_slot(&mut local, grads, *a, |s| add_to(s, gd));
                    self.with_slot(&mut local, grads, *b, |s| add_to(s, gd));
                }
                Op::AddRow(a, b) => {
                    self.with_slot(&mut local, grads, *a, |s| add_to(s, gd));
                    let d = g.cols();
                    self.with_slot(&mut local, grads, *b, |s| {
                        for r in 0..g.rows() {
                            add_to(s, &gd[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (ta.rows(), ta.cols(), tb.cols());
                    self.with_slot(&mut local, grads, *a, |s| matmul_bt_into(gd, tb.data(), m, p, k, s));
                    self.with_slot(&mut local, grads, *b, |s| matmul_at_into(ta.data(), gd, m, k, p, s));
                }
                Op::MatMulBt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (ta.rows(), ta.cols(), tb.rows());
                    self.with_slot(&mut local, grads, *a, |s| matmul_into(gd, tb.data(), m, p, k, s));
                    self.with_slot(&mut local, grads, *b, |s| matmul_at_into(gd, ta.data(), m, p, k, s));
                }
                Op::Scale(a, c) => {
                    self.with_slot(&mut local, grads, *a, |s| {
                        s.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)
                    });
                }
                Op::MaskedSoftmax(x) => {
                    let y = self.value(Var(i));
                    let c = y.cols();
                    self.with_slot(&mut local, grads, *x, |s| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &gd[r * c..(r + 1) * c];
                            let inner = super::dot(yr, gr);
                            for j in 0..c {
                                s[r * c + j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    self.with_slot(&mut local, grads, *a, |s| {
                        for ((x, y), v) in s.iter_mut().zip(gd).zip(ta.data()) {
                            if *v > 0.0 {
                                *x += y;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols();
                    let gamma = self.value(*gain).data();
                    self.with_slot(&mut local, grads, *gain, |s| {
                        for r in 0..g.rows() {
                            for j in 0..d {
                                s[j] += gd[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                    self.with_slot(&mut local, grads, *bias, |s| {
                        for r in 0..g.rows() {
                            add_to(s, &gd[r * d..(r + 1) * d]);
                        }
                    });
                    self.with_slot(&mut local, grads, *x, |s| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..g.rows() {
                            let xh = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gd[r * d + j] * gamma[j];
                            }
                            let sum: f64 = dxhat.iter().sum();
                            let sum_x: f64 = super::dot(&dxhat, xh);
                            let scale = inv_std[r] / d as f64;
                            for j in 0..d {
                                s[r * d + j] += scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
                            }
                        }
                    });
                }
                Op::MulConst { x, factor } => {
                    self.with_slot(&mut local, grads, *x, |s| {
                        for ((a, b), f) in s.iter_mut().zip(gd).zip(factor) {
                            *a += b * f;
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let w = g.cols();
                    let full = self.value(*x).cols();
                    self.with_slot(&mut local, grads, *x, |s| {
                        for r in 0..g.rows() {
                            add_to(&mut s[r * full + start..r * full + start + w], &gd[r * w..(r + 1) * w]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.with_slot(&mut local, grads, p, |s| {
                            for r in 0..g.rows() {
                                add_to(&mut s[r * w..(r + 1) * w], &gd[r * total + offset..r * total + offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let d = g.cols();
                    self.with_slot(&mut local, grads, *x, |s| {
                        for (k, &r) in rows.iter().enumerate() {
                            add_to(&mut s[r * d..(r + 1) * d], &gd[k * d..(k + 1) * d]);
                        }
                    });
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let d = ta.cols();
                    self.with_slot(&mut local, grads, *a, |s| {
                        for r in 0..ta.rows() {
                            for j in 0..d {
                                s[r * d + j] += gd[r] * tb.data()[r * d + j];
                            }
                        }
                    });
                    self.with_slot(&mut local, grads, *b, |s| {
                        for r in 0..ta.rows() {
                            for j in 0..d {
                                s[r * d + j] += gd[r] * ta.data()[r * d + j];
                            }
                        }
                    });
                }
                Op::WeightedSum { x, weights } => {
                    let g0 = gd[0];
                    self.with_slot(&mut local, grads, *x, |s| {
                        s.iter_mut().zip(weights).for_each(|(a, w)| *a += g0 * w)
                    });
                }
                Op::Bce { pos, neg, dpos, dneg } => {
                    let g0 = gd[0];
                    self.with_slot(&mut local, grads, *pos, |s| {
                        s.iter_mut().zip(dpos).for_each(|(a, d)| *a += g0 * d)
                    });
                    self.with_slot(&mut local, grads, *neg, |s| {
                        s.iter_mut().zip(dneg).for_each(|(a, d)| *a += g0 * d)
                    });
                }
                Op::SymKl { a, b, cols, da, db } => {
                    let g0 = gd[0];
                    let full = self.value(*a).cols();
                    let w = cols.len();
                    for (v, local_grad) in [(*a, da), (*b, db)] {
                        self.with_slot(&mut local, grads, v, |s| {
                            for (r, chunk) in local_grad.chunks(w.max(1)).enumerate() {
                                for (&c, d) in cols.iter().zip(chunk) {
                                    s[r * full + c] += g0 * d;
                                }
                            }
                        });
                    }
                }
                Op::LinComb(terms) => {
                    for &(x, c) in terms {
                        self.with_slot(&mut local, grads, x, |s| {
                            s.iter_mut().zip(gd).for_each(|(a, b)| *a += c * b)
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `(−ln clamp(σ(x)), d/dx)`; the derivative is zero where the clamp binds.
pub(crate) fn neg_log_sigmoid(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    if s < BCE_EPS {
        (-BCE_EPS.ln(), 0.0)
    } else if s > 1.0 - BCE_EPS {
        (-(1.0 - BCE_EPS).ln(), 0.0)
    } else {
        (-s.ln(), s - 1.0)
    }
}

pub(crate) fn log_softmax(xs: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.clone().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}
