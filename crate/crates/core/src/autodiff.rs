//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every value on the [`Tape`] is a row-major `f64` matrix (tokens × channels
//! for activations). Operations are recorded in execution order, so node
//! indices are a topological order and [`Tape::backward`] visits each node
//! exactly once, from the loss down to the leaves.
//!
//! Ops are coarse (a whole linear layer, a whole attention layer) and carry
//! whatever intermediates their backward pass needs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{resample_separable, AxisWeights};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Relative-position tables and per-row coordinates for an attention op.
#[derive(Clone, Debug)]
pub struct RelPosSpec {
    pub row_table: Var,
    pub col_table: Var,
    pub side: usize,
    /// Coordinates of every qkv row inside its attention group.
    pub coords: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Gather { x: Var, index: Vec<Option<usize>> },
    Resize { x: Var, channels: usize, rows: AxisWeights, cols: AxisWeights },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Attention { qkv: Var, heads: usize, groups: Vec<(usize, usize)>, relpos: Option<RelPosSpec>, probs: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanRows { x: Var },
    Sum { x: Var },
    HalfSquaredNorm { x: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    MaskedMse { pred: Var, target: Mat, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = libm::tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input; gradients are still available through [`Gradients::get`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; `id` is its slot in the owning parameter store.
    pub fn param(&mut self, id: usize, value: Mat) -> Var {
        self.push(value, Op::Param(id))
    }

    /// Parameter slots and their gradients, for every parameter the loss touched.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (usize, &'a Mat)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }

    /// `x · w + b`, with `x: n×i`, `w: i×o`, `b: 1×o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols != wv.rows {
            return Err(Error::invalid(format!(
                "linear: input has {} columns, weight has {} rows",
                xv.cols, wv.rows
            )));
        }
        let (n, o) = (xv.rows, wv.cols);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.data.len() != o {
                return Err(Error::invalid("linear: bias length mismatch"));
            }
            for r in 0..n {
                out[r * o..(r + 1) * o].copy_from_slice(&bv.data);
            }
        }
        for r in 0..n {
            let dst = &mut out[r * o..(r + 1) * o];
            for (k, &xk) in xv.row(r).iter().enumerate() {
                axpy(xk, wv.row(k), dst);
            }
        }
        Ok(self.push(Mat { rows: n, cols: o, data: out }, Op::Linear { x, w, b }))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols || (bv.rows != av.rows && bv.rows != 1) {
            return Err(Error::invalid(format!(
                "add: {}x{} and {}x{} are not compatible",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let mut out = av.data.clone();
        if bv.rows == av.rows {
            for (o, v) in out.iter_mut().zip(&bv.data) {
                *o += v;
            }
        } else {
            for r in 0..av.rows {
                for (o, v) in out[r * av.cols..(r + 1) * av.cols].iter_mut().zip(&bv.data) {
                    *o += v;
                }
            }
        }
        let value = Mat { rows: av.rows, cols: av.cols, data: out };
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let value = Mat { rows: xv.rows, cols: xv.cols, data: xv.data.iter().map(|v| v * factor).collect() };
        self.push(value, Op::Scale { x, factor })
    }

    /// Row gather: output row `r` is `x[index[r]]`, or zeros for `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        let mut out = vec![0.0; index.len() * c];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= xv.rows {
                    return Err(Error::invalid(format!("gather index {s} out of {} rows", xv.rows)));
                }
                out[r * c..(r + 1) * c].copy_from_slice(xv.row(s));
            }
        }
        let value = Mat { rows: index.len(), cols: c, data: out };
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// Bicubic resize of a grid stored as `(in_h·in_w) × channels` rows.
    pub fn resize(&mut self, x: Var, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows != in_h * in_w {
            return Err(Error::invalid("resize: row count does not match grid size"));
        }
        let rows = AxisWeights::new(in_h, out_h)?;
        let cols = AxisWeights::new(in_w, out_w)?;
        let channels = xv.cols;
        let data = resample_separable(&xv.data, channels, &rows, &cols);
        let value = Mat { rows: out_h * out_w, cols: channels, data };
        Ok(self.push(value, Op::Resize { x, channels, rows, cols }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows, xv.cols);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.data.len() != c || b.data.len() != c {
            return Err(Error::invalid("layer norm: affine parameter length mismatch"));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for k in 0..c {
                let h = (row[k] - mean) * rs;
                xhat[r * c + k] = h;
                out[r * c + k] = h * g.data[k] + b.data[k];
            }
        }
        let value = Mat { rows: n, cols: c, data: out };
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat { rows: xv.rows, cols: xv.cols, data: xv.data.iter().map(|&v| gelu(v).0).collect() };
        self.push(value, Op::Gelu { x })
    }

    /// Multi-head scaled dot-product attention. `qkv` rows hold
    /// `[q | k | v]` (each `dim` wide); tokens attend only within their
    /// contiguous `(start, len)` group.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        groups: Vec<(usize, usize)>,
        relpos: Option<RelPosSpec>,
    ) -> Result<Var> {
        let qv = self.value(qkv);
        if qv.cols % 3 != 0 {
            return Err(Error::invalid("attention: qkv width is not a multiple of 3"));
        }
        let dim = qv.cols / 3;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("attention: dim {dim} not divisible by {heads} heads")));
        }
        let hd = dim / heads;
        let m = qv.rows;
        if groups.iter().any(|&(s, l)| s + l > m || l == 0) {
            return Err(Error::invalid("attention: group outside qkv rows"));
        }
        let tables = match &relpos {
            Some(rp) => {
                let len = 2 * rp.side - 1;
                let (rt, ct) = (self.value(rp.row_table), self.value(rp.col_table));
                if rt.rows != len || ct.rows != len || rt.cols != hd || ct.cols != hd {
                    return Err(Error::invalid(format!(
                        "attention: relpos tables must be {len}x{hd}"
                    )));
                }
                if rp.coords.len() != m || rp.coords.iter().any(|&(y, x)| y >= rp.side || x >= rp.side) {
                    return Err(Error::invalid("attention: relpos coordinates outside table side"));
                }
                Some((rt, ct, rp.side, &rp.coords))
            }
            None => None,
        };
        let scale = 1.0 / libm::sqrt(hd as f64);
        let stride = 3 * dim;
        let mut out = vec![0.0; m * dim];
        let mut probs = Vec::with_capacity(groups.iter().map(|&(_, l)| l * l * heads).sum());
        let mut rel_buf_h = Vec::new();
        let mut rel_buf_w = Vec::new();
        for &(start, len) in &groups {
            for h in 0..heads {
                let q = |i: usize| &qv.data[(start + i) * stride + h * hd..][..hd];
                let k = |j: usize| &qv.data[(start + j) * stride + dim + h * hd..][..hd];
                let v = |j: usize| &qv.data[(start + j) * stride + 2 * dim + h * hd..][..hd];
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let row = &mut probs[base + i * len..base + (i + 1) * len];
                    for (j, l) in row.iter_mut().enumerate() {
                        *l = dot(q(i), k(j)) * scale;
                    }
                    if let Some((rt, ct, side, coords)) = tables {
                        let span = 2 * side - 1;
                        rel_buf_h.clear();
                        rel_buf_w.clear();
                        for r in 0..span {
                            rel_buf_h.push(dot(q(i), rt.row(r)));
                            rel_buf_w.push(dot(q(i), ct.row(r)));
                        }
                        let (qy, qx) = coords[start + i];
                        for (j, l) in row.iter_mut().enumerate() {
                            let (ky, kx) = coords[start + j];
                            *l += rel_buf_h[qy + side - 1 - ky] + rel_buf_w[qx + side - 1 - kx];
                        }
                    }
                    softmax(row);
                    let dst = &mut out[(start + i) * dim + h * hd..][..hd];
                    for (j, &p) in row.iter().enumerate() {
                        axpy(p, v(j), dst);
                    }
                }
            }
        }
        let value = Mat { rows: m, cols: dim, data: out };
        Ok(self.push(value, Op::Attention { qkv, heads, groups, relpos, probs }))
    }

    /// Channelwise max over each group of rows.
    pub fn max_pool(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols;
        let mut out = vec![0.0; groups.len() * c];
        let mut argmax = vec![0usize; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            let first = *members.first().ok_or_else(|| Error::invalid("max pool: empty group"))?;
            if members.iter().any(|&r| r >= xv.rows) {
                return Err(Error::invalid("max pool: row index out of range"));
            }
            for ch in 0..c {
                let mut best = first;
                let mut bv = xv.data[first * c + ch];
                for &r in &members[1..] {
                    let val = xv.data[r * c + ch];
                    if val > bv {
                        bv = val;
                        best = r;
                    }
                }
                out[g * c + ch] = bv;
                argmax[g * c + ch] = best;
            }
        }
        let value = Mat { rows: groups.len(), cols: c, data: out };
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = vec![0.0; xv.cols];
        for r in 0..xv.rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / xv.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Mat { rows: 1, cols: xv.cols, data: out };
        self.push(value, Op::MeanRows { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum { x })
    }

    /// `‖x‖² / 2`.
    pub fn half_squared_norm(&mut self, x: Var) -> Var {
        let s = 0.5 * self.value(x).data.iter().map(|v| v * v).sum::<f64>();
        self.push(Mat::scalar(s), Op::HalfSquaredNorm { x })
    }

    /// Softmax cross-entropy of a single `1×K` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows != 1 || label >= lv.cols {
            return Err(Error::invalid(format!("cross entropy: label {label} for {}x{} logits", lv.rows, lv.cols)));
        }
        let mut probs = lv.data.clone();
        softmax(&mut probs);
        let loss = -libm::log(probs[label].max(f64::MIN_POSITIVE));
        Ok(self.push(Mat::scalar(loss), Op::CrossEntropy { logits, label, probs }))
    }

    /// Mean squared error between `pred` and a constant `target`, over the
    /// listed rows only. An empty row set gives a loss of 0.
    pub fn masked_mse(&mut self, pred: Var, target: Mat, rows: Vec<usize>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.rows != target.rows || pv.cols != target.cols {
            return Err(Error::invalid("masked mse: prediction/target shape mismatch"));
        }
        if rows.iter().any(|&r| r >= pv.rows) {
            return Err(Error::invalid("masked mse: row index out of range"));
        }
        let count = rows.len() * pv.cols;
        let mut total = 0.0;
        for &r in &rows {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                total += (p - t) * (p - t);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(Mat::scalar(loss), Op::MaskedMse { pred, target, rows }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::state("backward called for a node that was never recorded"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::state("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, o) = (xv.rows, wv.cols);
                {
                    let dx = acc(grads, *x, xv);
                    for r in 0..n {
                        let gr = g.row(r);
                        let dst = &mut dx[r * xv.cols..(r + 1) * xv.cols];
                        for (k, d) in dst.iter_mut().enumerate() {
                            *d += dot(gr, wv.row(k));
                        }
                    }
                }
                {
                    let dw = acc(grads, *w, wv);
                    for r in 0..n {
                        let gr = g.row(r);
                        for (k, &xk) in xv.row(r).iter().enumerate() {
                            axpy(xk, gr, &mut dw[k * o..(k + 1) * o]);
                        }
                    }
                }
                if let Some(b) = b {
                    let db = acc(grads, *b, val(*b));
                    for r in 0..n {
                        axpy(1.0, g.row(r), db);
                    }
                }
            }
            Op::Add { a, b } => {
                let da = acc(grads, *a, val(*a));
                axpy(1.0, &g.data, da);
                let bv = val(*b);
                let db = acc(grads, *b, bv);
                if bv.rows == g.rows {
                    axpy(1.0, &g.data, db);
                } else {
                    for r in 0..g.rows {
                        axpy(1.0, g.row(r), db);
                    }
                }
            }
            Op::Scale { x, factor } => {
                let dx = acc(grads, *x, val(*x));
                axpy(*factor, &g.data, dx);
            }
            Op::Gather { x, index } => {
                let xv = val(*x);
                let c = xv.cols;
                let dx = acc(grads, *x, xv);
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        axpy(1.0, g.row(r), &mut dx[s * c..(s + 1) * c]);
                    }
                }
            }
            Op::Resize { x, channels, rows, cols } => {
                let xv = val(*x);
                let c = *channels;
                let (in_h, in_w) = (rows.in_len(), cols.in_len());
                let (out_h, out_w) = (rows.out_len(), cols.out_len());
                // transpose of the vertical pass
                let mut mid = vec![0.0; in_h * out_w * c];
                for oy in 0..out_h {
                    let src = &g.data[oy * out_w * c..(oy + 1) * out_w * c];
                    for &(sy, w) in rows.taps(oy) {
                        axpy(w, src, &mut mid[sy * out_w * c..(sy + 1) * out_w * c]);
                    }
                }
                let dx = acc(grads, *x, xv);
                for y in 0..in_h {
                    for ox in 0..out_w {
                        let src = &mid[(y * out_w + ox) * c..][..c];
                        for &(sx, w) in cols.taps(ox) {
                            axpy(w, src, &mut dx[(y * in_w + sx) * c..][..c]);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let xv = val(*x);
                let (n, c) = (xv.rows, xv.cols);
                let gv = val(*gamma);
                {
                    let dg = acc(grads, *gamma, gv);
                    for r in 0..n {
                        for k in 0..c {
                            dg[k] += g.data[r * c + k] * xhat[r * c + k];
                        }
                    }
                }
                {
                    let db = acc(grads, *beta, val(*beta));
                    for r in 0..n {
                        axpy(1.0, g.row(r), db);
                    }
                }
                let dx = acc(grads, *x, xv);
                let mut dxhat = vec![0.0; c];
                for r in 0..n {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for k in 0..c {
                        dxhat[k] = g.data[r * c + k] * gv.data[k];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dot(&dxhat, xh) / c as f64;
                    for k in 0..c {
                        dx[r * c + k] += rstd[r] * (dxhat[k] - mean_d - xh[k] * mean_dx);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let dx = acc(grads, *x, xv);
                for ((d, &xi), &gi) in dx.iter_mut().zip(&xv.data).zip(&g.data) {
                    *d += gi * gelu(xi).1;
                }
            }
            Op::Attention { qkv, heads, groups, relpos, probs } => {
                self.attention_backward(*qkv, *heads, groups, relpos.as_ref(), probs, g, grads);
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let c = xv.cols;
                let dx = acc(grads, *x, xv);
                for (idx, &src) in argmax.iter().enumerate() {
                    dx[src * c + idx % c] += g.data[idx];
                }
            }
            Op::MeanRows { x } => {
                let xv = val(*x);
                let inv = 1.0 / xv.rows as f64;
                let dx = acc(grads, *x, xv);
                for r in 0..xv.rows {
                    axpy(inv, &g.data, &mut dx[r * xv.cols..(r + 1) * xv.cols]);
                }
            }
            Op::Sum { x } => {
                let gs = g.data[0];
                let dx = acc(grads, *x, val(*x));
                dx.iter_mut().for_each(|d| *d += gs);
            }
            Op::HalfSquaredNorm { x } => {
                let xv = val(*x);
                let dx = acc(grads, *x, xv);
                axpy(g.data[0], &xv.data, dx);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gs = g.data[0];
                let dx = acc(grads, *logits, val(*logits));
                for (k, (d, p)) in dx.iter_mut().zip(probs).enumerate() {
                    *d += gs * (p - if k == *label { 1.0 } else { 0.0 });
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let pv = val(*pred);
                let count = rows.len() * pv.cols;
                if count == 0 {
                    return;
                }
                let coef = 2.0 * g.data[0] / count as f64;
                let c = pv.cols;
                let dp = acc(grads, *pred, pv);
                for &r in rows {
                    for k in 0..c {
                        dp[r * c + k] += coef * (pv.data[r * c + k] - target.data[r * c + k]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        qkv: Var,
        heads: usize,
        groups: &[(usize, usize)],
        relpos: Option<&RelPosSpec>,
        probs: &[f64],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let qv = &self.nodes[qkv.0].value;
        let dim = qv.cols / 3;
        let hd = dim / heads;
        let stride = 3 * dim;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut dqkv = vec![0.0; qv.data.len()];
        let tables = relpos.map(|rp| {
            (
                &self.nodes[rp.row_table.0].value,
                &self.nodes[rp.col_table.0].value,
                rp.side,
                &rp.coords,
            )
        });
        let span = tables.map(|t| 2 * t.2 - 1).unwrap_or(0);
        let mut d_row_table = vec![0.0; span * hd];
        let mut d_col_table = vec![0.0; span * hd];
        let mut acc_h = vec![0.0; span];
        let mut acc_w = vec![0.0; span];

        let mut offset = 0;
        let mut ds = Vec::new();
        for &(start, len) in groups {
            for h in 0..heads {
                let p = &probs[offset..offset + len * len];
                offset += len * len;
                let col = |row: usize, part: usize| (start + row) * stride + part * dim + h * hd;
                let go = |i: usize| &g.data[(start + i) * dim + h * hd..][..hd];
                // dV and dS
                ds.clear();
                ds.resize(len * len, 0.0);
                for i in 0..len {
                    let gi = go(i);
                    let prow = &p[i * len..(i + 1) * len];
                    let mut weighted = 0.0;
                    for j in 0..len {
                        let dp = dot(gi, &qv.data[col(j, 2)..col(j, 2) + hd]);
                        ds[i * len + j] = dp;
                        weighted += dp * prow[j];
                    }
                    for j in 0..len {
                        ds[i * len + j] = prow[j] * (ds[i * len + j] - weighted);
                        let vj = col(j, 2);
                        axpy(prow[j], gi, &mut dqkv[vj..vj + hd]);
                    }
                }
                // dQ, dK
                for i in 0..len {
                    let qi = col(i, 0);
                    for j in 0..len {
                        let s = ds[i * len + j];
                        if s == 0.0 {
                            continue;
                        }
                        let kj = col(j, 1);
                        for t in 0..hd {
                            dqkv[qi + t] += scale * s * qv.data[kj + t];
                            dqkv[kj + t] += scale * s * qv.data[qi + t];
                        }
                    }
                    if let Some((rt, ct, side, coords)) = tables {
                        acc_h.iter_mut().for_each(|v| *v = 0.0);
                        acc_w.iter_mut().for_each(|v| *v = 0.0);
                        let (qy, qx) = coords[start + i];
                        for j in 0..len {
                            let (ky, kx) = coords[start + j];
                            acc_h[qy + side - 1 - ky] += ds[i * len + j];
                            acc_w[qx + side - 1 - kx] += ds[i * len + j];
                        }
                        for r in 0..span {
                            if acc_h[r] != 0.0 {
                                axpy(acc_h[r], rt.row(r), &mut dqkv[qi..qi + hd]);
                                let q = &qv.data[qi..qi + hd];
                                axpy(acc_h[r], q, &mut d_row_table[r * hd..(r + 1) * hd]);
                            }
                            if acc_w[r] != 0.0 {
                                axpy(acc_w[r], ct.row(r), &mut dqkv[qi..qi + hd]);
                                let q = &qv.data[qi..qi + hd];
                                axpy(acc_w[r], q, &mut d_col_table[r * hd..(r + 1) * hd]);
                            }
                        }
                    }
                }
            }
        }
        let dst = acc(grads, qkv, qv);
        axpy(1.0, &dqkv, dst);
        if let Some(rp) = relpos {
            let rt = &self.nodes[rp.row_table.0].value;
            axpy(1.0, &d_row_table, acc(grads, rp.row_table, rt));
            let ct = &self.nodes[rp.col_table.0].value;
            axpy(1.0, &d_col_table, acc(grads, rp.col_table, ct));
        }
    }
}

/// Gradient buffer for `v`, created as zeros on first use.
fn acc<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut [f64] {
    &mut grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows, like.cols)).data
}
