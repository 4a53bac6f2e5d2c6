//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into the [`ParamStore`] the parameters were read from. Tapes are cheap and
//! meant to be built once per training instance and dropped afterwards.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean matrix, `true` where attention is allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: query `t` sees keys `0..=t`.
    pub fn causal(n: usize) -> Self {
        let mut m = Self::full(n, n);
        for r in 0..n {
            for c in r + 1..n {
                m.allowed[r * n + c] = false;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    /// Every query row sees exactly the keys flagged valid.
    pub fn keys(rows: usize, valid: &[bool]) -> Self {
        Self::from_fn(rows, valid.len(), |_, c| valid[c])
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    ParamSqNorm(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Ln(Var),
    Recip(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RepeatRows(Var),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BceMean { pred: Var, labels: Vec<f64>, eps: f64 },
}

struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax restricted to allowed entries; masked entries are 0.
pub(crate) fn masked_softmax(x: &Tensor2, mask: Option<&Mask>) -> Result<Tensor2> {
    let (rows, cols) = x.shape();
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let row = x.row(r);
        let allowed = |c: usize| mask.map_or(true, |m| m.allowed(r, c));
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: r });
        }
        let o = out.row_mut(r);
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                o[c] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter. Repeated reads of the same parameter share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_cache.insert(id, v);
        v
    }

    /// Looks up rows of an embedding table without copying the whole table.
    pub fn gather(&mut self, store: &ParamStore, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = store.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::Validation(format!(
                    "row {r} out of range for {} ({} rows)",
                    store.name(table),
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(r));
        }
        Ok(self.push(
            Tensor2::from_raw(rows.len(), d, data),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `‖p‖²` of a parameter, read in place.
    pub fn param_sq_norm(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = store.value(id).sum_squares();
        self.push(Tensor2::from_raw(1, 1, vec![v]), Op::ParamSqNorm(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} · {br}x{bc}")));
        }
        let out = self.value(a).matmul(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::shape("matmul_t", format!("{ar}x{ac} · ({br}x{bc})ᵀ")));
        }
        let out = self.value(a).matmul_t(self.value(b));
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::from_raw(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor2 {
        let t = self.value(a);
        Tensor2::from_raw(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + {:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, x) in out.row_mut(i).iter_mut().zip(&b) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = self.map(a, f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let out = self.map(a, f64::ln);
        Ok(self.push(out, Op::Ln(a)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric("reciprocal of zero".into()));
        }
        let out = self.map(a, |x| 1.0 / x);
        Ok(self.push(out, Op::Recip(a)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(x, |v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax. Masked entries receive probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        if let Some(m) = mask {
            if m.shape() != self.shape(x) {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} vs logits {:?}", m.shape(), self.shape(x)),
                ));
            }
        }
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {cols}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor2::from_raw(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat_cols", format!("height {r} vs {rows}")));
            }
            cols += c;
        }
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let c = t.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = self.shape(x);
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = self.value(x).slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        Ok(self.push(Tensor2::from_raw(r, end - start, data), Op::SliceCols { x, start }))
    }

    /// Repeats a `1×n` row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::shape("repeat_rows", format!("expected 1 row, got {r}")));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        Ok(self.push(Tensor2::from_raw(times, c, data), Op::RepeatRows(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Column means, `1×n`. An empty input yields zeros.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        if r > 0 {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        self.push(Tensor2::from_raw(1, c, out), Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::from_raw(1, 1, vec![s]), Op::SumAll(x))
    }

    /// Per-row standardisation without an affine transform.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut out = Tensor2::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Mean binary cross-entropy of probabilities `pred` (n×1) against
    /// `labels`, with predictions clamped into `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let t = self.value(pred);
        if t.data().len() != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "bce_mean",
                format!("{} predictions, {} labels", t.data().len(), labels.len()),
            ));
        }
        let loss = crate::objectives::bce_with_eps(
            t.data().iter().copied().zip(labels.iter().copied()),
            eps,
        );
        Ok(self.push(
            Tensor2::from_raw(1, 1, vec![loss]),
            Op::BceMean {
                pred,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Back-propagates from the scalar node `loss`, adding parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        self.backward_from(loss, Tensor2::filled(1, 1, 1.0), store)
    }

    pub fn backward_from(&self, root: Var, seed: Tensor2, store: &mut ParamStore) -> Result<()> {
        let mut grads: Vec<Option<Tensor2>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.entry_mut(*id).grad.add_assign(&g),
                Op::Gather { table, rows } => {
                    let entry = store.entry_mut(*table);
                    for (i, &r) in rows.iter().enumerate() {
                        for (dst, src) in entry.grad.row_mut(r).iter_mut().zip(g.row(i)) {
                            *dst += src;
                        }
                    }
                }
                Op::ParamSqNorm(id) => {
                    let s = 2.0 * g.data()[0];
                    let entry = store.entry_mut(*id);
                    for (dst, v) in entry.grad.data_mut().iter_mut().zip(entry.value.data()) {
                        *dst += s * v;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ ⇒ da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, neg);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, v) in gr.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, Tensor2::row_vector(gr));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = elementwise(&g, vb, |x, y| x * y);
                    let gb = elementwise(&g, va, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    acc(&mut grads, *a, ga);
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let ga = elementwise(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, out, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = elementwise(&g, out, |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = elementwise(&g, self.value(*a), |gv, x| gv / x);
                    acc(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = elementwise(&g, out, |gv, y| -gv * y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp { x, lo, hi } => {
                    let ga = elementwise(&g, self.value(*x), |gv, v| {
                        if v < *lo || v > *hi {
                            0.0
                        } else {
                            gv
                        }
                    });
                    acc(&mut grads, *x, ga);
                }
                Op::Softmax(x) => {
                    let (r, c) = out.shape();
                    let mut gx = Tensor2::zeros(r, c);
                    for i in 0..r {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(y).zip(gy) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        acc(&mut grads, p, g.slice_rows(offset, offset + r));
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Tensor2::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        acc(&mut grads, p, gp);
                        offset += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor2::zeros(r, c);
                    for i in 0..g.rows() {
                        gx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor2::zeros(r, c);
                    let w = g.cols();
                    for i in 0..r {
                        gx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatRows(x) => {
                    let mut gx = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, v) in gx.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, Tensor2::row_vector(gx));
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()),
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor2::zeros(r, c);
                    if r > 0 {
                        for i in 0..r {
                            for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(0)) {
                                *o = v / r as f64;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut grads, *x, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::LayerNorm { x, inv_std } => {
                    let (r, c) = out.shape();
                    let n = c as f64;
                    let mut gx = Tensor2::zeros(r, c);
                    for i in 0..r {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = y.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(y).zip(gy) {
                            *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BceMean { pred, labels, eps } => {
                    let p = self.value(*pred);
                    let n = labels.len() as f64;
                    let gl = g.data()[0];
                    let data = p
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&yh, &y)| {
                            if yh < *eps || yh > 1.0 - eps {
                                0.0
                            } else {
                                -gl * (y / yh - (1.0 - y) / (1.0 - yh)) / n
                            }
                        })
                        .collect();
                    acc(&mut grads, *pred, Tensor2::from_raw(p.rows(), p.cols(), data));
                }
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_raw(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, Tensor2::from_vec(rows, cols, data).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn sum_of_vector_has_unit_gradient() {
        let (mut store, id) = store_with("p", 1, 3, vec![0.3, -1.0, 2.0]);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.sum_all(p);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let (mut store, id) = store_with("p", 1, 2, vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let n = tape.param_sq_norm(&store, id);
        let half = tape.scale(n, 0.5);
        tape.backward(half, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_scatters_into_table_rows() {
        let (mut store, id) = store_with("emb", 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let rows = tape.gather(&store, id, &[2, 0, 2]).unwrap();
        let s = tape.sum_all(rows);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather(&store, id, &[3]).is_err());
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::zeros(2, 2));
        let mask = Mask::from_fn(2, 2, |r, _| r == 0);
        assert!(matches!(tape.softmax(x, Some(&mask)), Err(Error::InvalidMask { row: 1 })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[vec![1.0, 5.0, -3.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let y = tape.softmax(x, Some(&Mask::causal(3).clone_rows(2))).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.value(y).get(0, 1), 0.0);
    }

    impl Mask {
        fn clone_rows(&self, rows: usize) -> Mask {
            Mask::from_fn(rows, self.cols, |r, c| self.allowed(r, c))
        }
    }
}
