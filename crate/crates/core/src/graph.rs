//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in execution order together with the
//! state its local derivative needs. Parameters are read from a shared
//! [`ParamStore`]; gradients land in a caller-owned [`Gradients`] buffer so
//! several graphs over the same parameters can run on different threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a recorded value. Only valid on the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    node: usize,
    graph: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Pick { x: usize, cols: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Bilinear(Box<BilinearState>),
    SpanAttend(Box<SpanAttendState>),
    SpanMean { h: usize, spans: Vec<(usize, usize)> },
    SpanMax { h: usize, argmax: Vec<usize> },
}

#[derive(Debug)]
struct BilinearState {
    x: usize,
    u: usize,
    y: usize,
    pairs: Vec<(usize, usize)>,
    // x_i^T U per distinct left row, q x r each
    left: Vec<Option<Vec<f64>>>,
}

#[derive(Debug)]
struct SpanAttendState {
    h: usize,
    scores: usize,
    spans: Vec<(usize, usize)>,
    alphas: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    id: u64,
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
}

fn shape_err<T>(op: &'static str, a: &Tensor, b: &Tensor) -> Result<T> {
    Err(Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
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

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.node >= self.nodes.len() {
            return contract("operand does not belong to this graph");
        }
        Ok(v.node)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name.into() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            node: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.node].value
    }

    /// Attention weights retained by a [`Graph::span_attend`] node.
    pub fn span_alphas(&self, v: Var) -> Option<&[Vec<f64>]> {
        if v.graph != self.id {
            return None;
        }
        match &self.nodes[v.node].op {
            Op::SpanAttend(s) => Some(&s.alphas),
            _ => None,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var {
                node: n,
                graph: self.id,
            };
        }
        let value = self.params.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var {
            node: n,
            graph: self.id,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return shape_err("matmul", ta, tb);
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.shape().len() != 2 {
            return contract(format!("transpose needs a matrix, got {:?}", t.shape()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = t.data()[r * n + c];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(ia), "transpose")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return shape_err(name, ta, tb);
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op(ia, ib), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if tb.numel() != ta.cols() || ta.shape().len() != 2 {
            return shape_err("add_row", ta, tb);
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, tb.data());
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(ia, ib), "add_row")
    }

    /// `a[m,n] * g[m,1]`, each row scaled by its own scalar.
    pub fn mul_col(&mut self, a: Var, g: Var) -> Result<Var> {
        let (ia, ig) = (self.idx(a)?, self.idx(g)?);
        let (ta, tg) = (&self.nodes[ia].value, &self.nodes[ig].value);
        if tg.numel() != ta.rows() || ta.shape().len() != 2 {
            return shape_err("mul_col", ta, tg);
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, s) in data.chunks_mut(n).zip(tg.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::MulCol(ia, ig), "mul_col")
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Affine(ia, scale), "affine")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let data = t.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, op(ia), name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", crate::tensor::sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", f64::ln, Op::Log)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Clamp { x: ia, lo, hi }, "clamp")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let first = match ids.first() {
            Some(i) => &self.nodes[*i].value,
            None => return contract("concat of zero tensors"),
        };
        let rows = first.rows();
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.shape().len() != 2 || t.rows() != rows {
                return shape_err("concat_cols", first, t);
            }
        }
        let total: usize = ids.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(ids), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let first = match ids.first() {
            Some(i) => &self.nodes[*i].value,
            None => return contract("concat of zero tensors"),
        };
        let cols = first.cols();
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.shape().len() != 2 || t.cols() != cols {
                return shape_err("concat_rows", first, t);
            }
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            data.extend_from_slice(self.nodes[i].value.data());
            rows += self.nodes[i].value.rows();
        }
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(ids), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.shape().len() != 2 || len == 0 || start + len > t.cols() {
            return contract(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                t.shape()
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data)?;
        self.push(out, Op::SliceCols { x: ia, start }, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.shape().len() != 2 || len == 0 || start + len > t.rows() {
            return contract(format!(
                "slice_rows [{start}, {}) out of range for {:?}",
                start + len,
                t.shape()
            ));
        }
        let n = t.cols();
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::matrix(len, n, data)?;
        self.push(out, Op::SliceRows { x: ia, start }, "slice_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if idx.is_empty() {
            return contract("gather_rows with no indices");
        }
        if let Some(bad) = idx.iter().find(|&&r| r >= t.rows()) {
            return contract(format!("row {bad} out of range for {:?}", t.shape()));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        self.push(
            out,
            Op::GatherRows {
                x: ia,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let n = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            data.extend(crate::tensor::softmax(row));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::SoftmaxRows(ia), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let n = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmaxRows(ia), "log_softmax_rows")
    }

    /// `out[r] = a[r, cols[r]]`, shape `[rows, 1]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if cols.len() != t.rows() || cols.iter().any(|&c| c >= t.cols()) {
            return contract(format!(
                "pick: {} column indices for {:?}",
                cols.len(),
                t.shape()
            ));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        let out = Tensor::matrix(cols.len(), 1, data)?;
        self.push(
            out,
            Op::Pick {
                x: ia,
                cols: cols.to_vec(),
            },
            "pick",
        )
    }

    /// Inverted dropout with an explicit stored mask. `rate == 0` is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return contract(format!("dropout rate {rate} not in [0, 1)"));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let ia = self.idx(a)?;
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[ia].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if mask.len() != t.numel() {
            return contract("dropout mask size mismatch");
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x: ia, mask }, "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(ia), "mean")
    }

    /// Batched three-way contraction over index pairs:
    /// `out[s, k] = sum_{a,b} x[i_s, a] * u[a, k, b] * y[j_s, b]`
    /// with `x: [n1, p]`, `u: [p, q, r]`, `y: [n2, r]`, output `[S, q]`.
    pub fn bilinear(&mut self, x: Var, u: Var, y: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (ix, iu, iy) = (self.idx(x)?, self.idx(u)?, self.idx(y)?);
        let (tx, tu, ty) = (
            &self.nodes[ix].value,
            &self.nodes[iu].value,
            &self.nodes[iy].value,
        );
        if tu.shape().len() != 3 {
            return shape_err("bilinear", tx, tu);
        }
        let (p, q, r) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
        if tx.shape().len() != 2 || tx.cols() != p {
            return shape_err("bilinear", tx, tu);
        }
        if ty.shape().len() != 2 || ty.cols() != r {
            return shape_err("bilinear", tu, ty);
        }
        if pairs.is_empty() {
            return contract("bilinear with no index pairs");
        }
        if pairs.iter().any(|&(i, j)| i >= tx.rows() || j >= ty.rows()) {
            return contract("bilinear pair index out of range");
        }
        let mut left: Vec<Option<Vec<f64>>> = vec![None; tx.rows()];
        for &(i, _) in pairs {
            if left[i].is_none() {
                let xi = tx.row(i);
                let mut t = vec![0.0; q * r];
                for (a, &xa) in xi.iter().enumerate() {
                    if xa == 0.0 {
                        continue;
                    }
                    let ua = &tu.data()[a * q * r..(a + 1) * q * r];
                    for (tv, uv) in t.iter_mut().zip(ua) {
                        *tv += xa * uv;
                    }
                }
                left[i] = Some(t);
            }
        }
        let mut out = vec![0.0; pairs.len() * q];
        for (s, &(i, j)) in pairs.iter().enumerate() {
            let t = left[i].as_ref().expect("left projection");
            let yj = ty.row(j);
            for k in 0..q {
                out[s * q + k] = t[k * r..(k + 1) * r]
                    .iter()
                    .zip(yj)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let value = Tensor::matrix(pairs.len(), q, out)?;
        self.push(
            value,
            Op::Bilinear(Box::new(BilinearState {
                x: ix,
                u: iu,
                y: iy,
                pairs: pairs.to_vec(),
                left,
            })),
            "bilinear",
        )
    }

    /// Attention pooling of rows of `h` over each inclusive span, with
    /// weights from a softmax over `scores[t]` restricted to the span.
    /// Single-row spans return their row unchanged and ignore the score.
    pub fn span_attend(&mut self, h: Var, scores: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (ih, is) = (self.idx(h)?, self.idx(scores)?);
        let (th, ts) = (&self.nodes[ih].value, &self.nodes[is].value);
        if ts.numel() != th.rows() {
            return shape_err("span_attend", th, ts);
        }
        check_spans(spans, th.rows())?;
        let n = th.cols();
        let mut out = Vec::with_capacity(spans.len() * n);
        let mut alphas = Vec::with_capacity(spans.len());
        for &(i, j) in spans {
            if i == j {
                out.extend_from_slice(th.row(i));
                alphas.push(vec![1.0]);
                continue;
            }
            let alpha = crate::tensor::softmax(&ts.data()[i..=j]);
            let mut pooled = vec![0.0; n];
            for (t, a) in (i..=j).zip(&alpha) {
                for (pv, hv) in pooled.iter_mut().zip(th.row(t)) {
                    *pv += a * hv;
                }
            }
            out.extend(pooled);
            alphas.push(alpha);
        }
        let value = Tensor::matrix(spans.len(), n, out)?;
        self.push(
            value,
            Op::SpanAttend(Box::new(SpanAttendState {
                h: ih,
                scores: is,
                spans: spans.to_vec(),
                alphas,
            })),
            "span_attend",
        )
    }

    pub fn span_mean(&mut self, h: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let ih = self.idx(h)?;
        let th = &self.nodes[ih].value;
        check_spans(spans, th.rows())?;
        let n = th.cols();
        let mut out = Vec::with_capacity(spans.len() * n);
        for &(i, j) in spans {
            let w = 1.0 / (j - i + 1) as f64;
            let mut pooled = vec![0.0; n];
            for t in i..=j {
                for (pv, hv) in pooled.iter_mut().zip(th.row(t)) {
                    *pv += w * hv;
                }
            }
            out.extend(pooled);
        }
        let value = Tensor::matrix(spans.len(), n, out)?;
        self.push(
            value,
            Op::SpanMean {
                h: ih,
                spans: spans.to_vec(),
            },
            "span_mean",
        )
    }

    pub fn span_max(&mut self, h: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let ih = self.idx(h)?;
        let th = &self.nodes[ih].value;
        check_spans(spans, th.rows())?;
        let n = th.cols();
        let mut out = Vec::with_capacity(spans.len() * n);
        let mut argmax = Vec::with_capacity(spans.len() * n);
        for &(i, j) in spans {
            for c in 0..n {
                let mut best = i;
                for t in i + 1..=j {
                    if th.at(t, c) > th.at(best, c) {
                        best = t;
                    }
                }
                out.push(th.at(best, c));
                argmax.push(best);
            }
        }
        let value = Tensor::matrix(spans.len(), n, out)?;
        self.push(
            value,
            Op::SpanMax {
                h: ih,
                argmax,
            },
            "span_max",
        )
    }

    /// Accumulates `d loss / d param` into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        self.backward_seeded(loss, 1.0, grads)
    }

    /// Backward pass with upstream gradient `seed` on the scalar loss.
    pub fn backward_seeded(&self, loss: Var, seed: f64, grads: &mut Gradients) -> Result<()> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            ));
        }
        if grads.len() != self.params.len() {
            return contract("gradient buffer does not match parameter store");
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![seed]);
        for n in (0..=root).rev() {
            let Some(g) = adj[n].take() else { continue };
            self.propagate(n, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn propagate(&self, n: usize, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let buf = adj[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
            f(buf);
        };
        match &nodes[n].op {
            Op::Leaf => {}
            Op::Param(id) => add_into(grads.get_mut(*id), g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, nn) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G B^T
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let gi = &g[i * nn..(i + 1) * nn];
                        for kk in 0..k {
                            let brow = &tb.data()[kk * nn..(kk + 1) * nn];
                            da[i * k + kk] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let gi = &g[i * nn..(i + 1) * nn];
                        for kk in 0..k {
                            let a_ik = ta.data()[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[kk * nn..(kk + 1) * nn].iter_mut().zip(gi) {
                                *d += a_ik * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let t = val(*a);
                let (m, nn) = (t.rows(), t.cols());
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..nn {
                            da[r * nn + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let nn = val(*a).cols();
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(nn) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let nn = ta.cols();
                acc(*a, &mut |d| {
                    for ((drow, grow), sv) in d.chunks_mut(nn).zip(g.chunks(nn)).zip(ts.data()) {
                        for (x, y) in drow.iter_mut().zip(grow) {
                            *x += y * sv;
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for ((dv, grow), arow) in d.iter_mut().zip(g.chunks(nn)).zip(ta.data().chunks(nn)) {
                        *dv += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(*a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += scale * y;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = val(n);
                acc(*a, &mut |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *x += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = val(n);
                acc(*a, &mut |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *x += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = val(n);
                acc(*a, &mut |d| {
                    for ((x, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *x += gv * yv;
                    }
                });
            }
            Op::Log(a) => {
                let xin = val(*a);
                acc(*a, &mut |d| {
                    for ((x, gv), xv) in d.iter_mut().zip(g).zip(xin.data()) {
                        *x += gv / xv;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xin = val(*x);
                acc(*x, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xin.data()) {
                        if *xv >= *lo && *xv <= *hi {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(ids) => {
                let total = val(n).cols();
                let rows = val(n).rows();
                let mut off = 0;
                for &i in ids {
                    let c = val(i).cols();
                    acc(i, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &i in ids {
                    let len = val(i).numel();
                    acc(i, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (full, part) = (val(*x).cols(), val(n).cols());
                acc(*x, &mut |d| {
                    for (r, grow) in g.chunks(part).enumerate() {
                        add_into(&mut d[r * full + start..r * full + start + part], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = val(n);
                let c = y.cols();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = val(n);
                let c = y.cols();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::Pick { x, cols } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &col) in cols.iter().enumerate() {
                        d[r * c + col] += g[r];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for ((dv, gv), m) in d.iter_mut().zip(g).zip(mask) {
                        *dv += gv * m;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let w = g[0] / val(*a).numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += w));
            }
            Op::Bilinear(st) => {
                let (tx, tu, ty) = (val(st.x), val(st.u), val(st.y));
                let (p, q, r) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
                // dY[j] += G_s^T T_i ; M_i = sum_s G_s (x) y_j
                let mut m_by_left: Vec<Option<Vec<f64>>> = vec![None; tx.rows()];
                acc(st.y, &mut |dy| {
                    for (s, &(i, j)) in st.pairs.iter().enumerate() {
                        let t = st.left[i].as_ref().expect("left projection");
                        let gs = &g[s * q..(s + 1) * q];
                        let dyj = &mut dy[j * r..(j + 1) * r];
                        for (k, gk) in gs.iter().enumerate() {
                            if *gk == 0.0 {
                                continue;
                            }
                            for (dv, tv) in dyj.iter_mut().zip(&t[k * r..(k + 1) * r]) {
                                *dv += gk * tv;
                            }
                        }
                    }
                });
                for (s, &(i, j)) in st.pairs.iter().enumerate() {
                    let m = m_by_left[i].get_or_insert_with(|| vec![0.0; q * r]);
                    let yj = ty.row(j);
                    for (k, gk) in g[s * q..(s + 1) * q].iter().enumerate() {
                        if *gk == 0.0 {
                            continue;
                        }
                        for (mv, yv) in m[k * r..(k + 1) * r].iter_mut().zip(yj) {
                            *mv += gk * yv;
                        }
                    }
                }
                acc(st.u, &mut |du| {
                    for (i, m) in m_by_left.iter().enumerate() {
                        let Some(m) = m else { continue };
                        for (a, &xa) in tx.row(i).iter().enumerate() {
                            if xa == 0.0 {
                                continue;
                            }
                            for (dv, mv) in du[a * q * r..(a + 1) * q * r].iter_mut().zip(m) {
                                *dv += xa * mv;
                            }
                        }
                    }
                });
                acc(st.x, &mut |dx| {
                    for (i, m) in m_by_left.iter().enumerate() {
                        let Some(m) = m else { continue };
                        for a in 0..p {
                            let ua = &tu.data()[a * q * r..(a + 1) * q * r];
                            dx[i * p + a] += ua.iter().zip(m).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            Op::SpanAttend(st) => {
                let th = val(st.h);
                let c = th.cols();
                let mut dscore = vec![0.0; th.rows()];
                acc(st.h, &mut |dh| {
                    for (s, (&(i, j), alpha)) in st.spans.iter().zip(&st.alphas).enumerate() {
                        let gs = &g[s * c..(s + 1) * c];
                        if i == j {
                            add_into(&mut dh[i * c..(i + 1) * c], gs);
                            continue;
                        }
                        let dalpha: Vec<f64> = (i..=j)
                            .map(|t| gs.iter().zip(th.row(t)).map(|(a, b)| a * b).sum())
                            .collect();
                        let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                        for (k, t) in (i..=j).enumerate() {
                            for (dv, gv) in dh[t * c..(t + 1) * c].iter_mut().zip(gs) {
                                *dv += alpha[k] * gv;
                            }
                            dscore[t] += alpha[k] * (dalpha[k] - mean);
                        }
                    }
                });
                acc(st.scores, &mut |ds| add_into(ds, &dscore));
            }
            Op::SpanMean { h, spans } => {
                let c = val(*h).cols();
                acc(*h, &mut |dh| {
                    for (s, &(i, j)) in spans.iter().enumerate() {
                        let w = 1.0 / (j - i + 1) as f64;
                        for t in i..=j {
                            for (dv, gv) in dh[t * c..(t + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                                *dv += w * gv;
                            }
                        }
                    }
                });
            }
            Op::SpanMax { h, argmax, .. } => {
                let c = val(*h).cols();
                acc(*h, &mut |dh| {
                    for (k, &t) in argmax.iter().enumerate() {
                        dh[t * c + k % c] += g[k];
                    }
                });
            }
        }
    }
}

fn check_spans(spans: &[(usize, usize)], rows: usize) -> Result<()> {
    if spans.is_empty() {
        return contract("no spans given");
    }
    for &(i, j) in spans {
        if i > j {
            return contract(format!("span start {i} exceeds end {j}"));
        }
        if j >= rows {
            return contract(format!("span ({i}, {j}) exceeds length {rows}"));
        }
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += a_ik * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(items: &[(&str, Tensor)]) -> ParamStore {
        let mut ps = ParamStore::new();
        for (n, t) in items {
            ps.add(*n, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_by_zero_annihilates() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g
            .constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
        assert!(g.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        match g.log(a) {
            Err(Error::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let ps = store(&[("x", Tensor::matrix(2, 3, vec![0.3; 6]).unwrap())]);
        let mut g = Graph::new(&ps);
        let x = g.param(ps.id("x").unwrap());
        let s = g.sum(x).unwrap();
        let mut grads = Gradients::zeros_like(&ps);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(ps.id("x").unwrap()), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let ps = store(&[("w", Tensor::scalar(0.0))]);
        let mut g = Graph::new(&ps);
        let w = g.param(ps.id("w").unwrap());
        let s = g.sigmoid(w).unwrap();
        assert_eq!(g.value(s).item(), Some(0.5));
        let mut grads = Gradients::zeros_like(&ps);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(ps.id("w").unwrap()), &[0.25]);
    }

    #[test]
    fn backward_twice_accumulates_exactly() {
        let ps = store(&[("w", Tensor::matrix(2, 2, vec![0.1, -0.4, 0.7, 0.2]).unwrap())]);
        let mut g = Graph::new(&ps);
        let w = g.param(ps.id("w").unwrap());
        let t = g.tanh(w).unwrap();
        let m = g.mul(t, w).unwrap();
        let s = g.mean(m).unwrap();
        let mut once = Gradients::zeros_like(&ps);
        g.backward(s, &mut once).unwrap();
        let mut twice = Gradients::zeros_like(&ps);
        g.backward(s, &mut twice).unwrap();
        g.backward(s, &mut twice).unwrap();
        let mut doubled = once.clone();
        doubled.scale(2.0);
        assert_eq!(doubled, twice);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let ps = store(&[("w", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap())]);
        let mut g = Graph::new(&ps);
        let w = g.param(ps.id("w").unwrap());
        let e = g.exp(w).unwrap();
        let s = g.sum(e).unwrap();
        let mut grads = Gradients::zeros_like(&ps);
        g.backward_seeded(s, 0.0, &mut grads).unwrap();
        assert!(grads.get(ps.id("w").unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_or_foreign_loss_rejected() {
        let ps = store(&[("w", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap())]);
        let mut g = Graph::new(&ps);
        let w = g.param(ps.id("w").unwrap());
        let mut grads = Gradients::zeros_like(&ps);
        assert!(matches!(g.backward(w, &mut grads), Err(Error::Contract(_))));

        let mut other = Graph::new(&ps);
        let w2 = other.param(ps.id("w").unwrap());
        let s2 = other.sum(w2).unwrap();
        assert!(matches!(g.backward(s2, &mut grads), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_rate_validated_and_zero_is_identity() {
        use rand::SeedableRng;
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = g.constant(Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert!(g.dropout(a, 1.0, &mut rng).is_err());
        assert_eq!(g.dropout(a, 0.0, &mut rng).unwrap(), a);
        let d = g.dropout(a, 0.5, &mut rng).unwrap();
        assert!(g.value(d).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
