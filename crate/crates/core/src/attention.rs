//! Multi-head self-attention over a token grid in three spatial regimes:
//! window attention, global attention, and attention with a decomposed
//! relative-position bias.
//!
//! Without relpos every query row is computed in a single pass over a
//! row-sized logit buffer. With relpos the per-head `n×n` bias is
//! materialised first (per-axis terms broadcast over the key grid) and added
//! to a materialised logit matrix, which is the reason relpos layers cost
//! more at large token counts.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{window_partition, window_unpartition, Grid, WindowLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayerConfig {
    pub dim: usize,
    pub heads: usize,
    /// Tokens per window side; `None` is global attention.
    pub window_size: Option<usize>,
    pub use_relpos: bool,
}

impl AttentionLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.window_size == Some(0) {
            return Err(Error::invalid("window size must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Side length relpos tables need for a `height × width` input.
    pub fn attended_side(&self, height: usize, width: usize) -> usize {
        self.window_size.unwrap_or(height.max(width))
    }
}

/// Per-axis relative-position tables, each `(2·side − 1) × head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosTables {
    side: usize,
    head_dim: usize,
    row: Vec<f32>,
    col: Vec<f32>,
}

impl RelPosTables {
    pub fn zeros(side: usize, head_dim: usize) -> Self {
        let len = (2 * side - 1) * head_dim;
        RelPosTables { side, head_dim, row: vec![0.0; len], col: vec![0.0; len] }
    }

    pub fn new(side: usize, head_dim: usize, row: Vec<f32>, col: Vec<f32>) -> Result<Self> {
        let len = (2 * side).saturating_sub(1) * head_dim;
        if side == 0 || row.len() != len || col.len() != len {
            return Err(Error::invalid(format!(
                "relpos tables for side {side} need {len} values per axis"
            )));
        }
        Ok(RelPosTables { side, head_dim, row, col })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn row(&self) -> &[f32] {
        &self.row
    }

    pub fn col(&self) -> &[f32] {
        &self.col
    }

    fn row_entry(&self, offset: usize) -> &[f32] {
        &self.row[offset * self.head_dim..(offset + 1) * self.head_dim]
    }

    fn col_entry(&self, offset: usize) -> &[f32] {
        &self.col[offset * self.head_dim..(offset + 1) * self.head_dim]
    }
}

/// Projection weights (row-major `in × out`) and optional relpos tables.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub qkv_w: Vec<f32>,
    pub qkv_b: Vec<f32>,
    pub proj_w: Vec<f32>,
    pub proj_b: Vec<f32>,
    pub relpos: Option<RelPosTables>,
}

impl AttentionParams {
    /// Identity Q/K/V and output projections, zero biases.
    pub fn identity(dim: usize) -> Self {
        let mut qkv_w = vec![0.0; dim * 3 * dim];
        for i in 0..dim {
            for part in 0..3 {
                qkv_w[i * 3 * dim + part * dim + i] = 1.0;
            }
        }
        let mut proj_w = vec![0.0; dim * dim];
        for i in 0..dim {
            proj_w[i * dim + i] = 1.0;
        }
        AttentionParams { qkv_w, qkv_b: vec![0.0; 3 * dim], proj_w, proj_b: vec![0.0; dim], relpos: None }
    }

    /// Gaussian projections with std `1/sqrt(dim)`; relpos tables (if the
    /// config asks for them) are sized for `side` and filled with small noise.
    pub fn random<R: Rng + ?Sized>(cfg: &AttentionLayerConfig, side: usize, rng: &mut R) -> Self {
        let dim = cfg.dim;
        let normal = Normal::new(0.0f32, 1.0 / libm::sqrtf(dim as f32)).unwrap();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(rng)).collect() };
        let qkv_w = draw(dim * 3 * dim);
        let qkv_b = draw(3 * dim);
        let proj_w = draw(dim * dim);
        let proj_b = draw(dim);
        let relpos = cfg.use_relpos.then(|| {
            let hd = cfg.head_dim();
            let len = (2 * side - 1) * hd;
            RelPosTables { side, head_dim: hd, row: draw(len), col: draw(len) }
        });
        AttentionParams { qkv_w, qkv_b, proj_w, proj_b, relpos }
    }

    fn check(&self, cfg: &AttentionLayerConfig) -> Result<()> {
        let d = cfg.dim;
        if self.qkv_w.len() != d * 3 * d
            || self.qkv_b.len() != 3 * d
            || self.proj_w.len() != d * d
            || self.proj_b.len() != d
        {
            return Err(Error::invalid("attention parameter shapes do not match config dim"));
        }
        Ok(())
    }
}

/// `out[r, :] = x[r, :] · w + b` for row-major `x: n×i`, `w: i×o`.
pub fn linear(x: &[f32], n: usize, w: &[f32], b: &[f32], out_dim: usize) -> Vec<f32> {
    let in_dim = w.len() / out_dim;
    let mut out = Vec::with_capacity(n * out_dim);
    for r in 0..n {
        out.extend_from_slice(b);
        let dst = &mut out[r * out_dim..];
        for (k, &xv) in x[r * in_dim..(r + 1) * in_dim].iter().enumerate() {
            let wr = &w[k * out_dim..(k + 1) * out_dim];
            for (d, &wv) in dst.iter_mut().zip(wr) {
                *d += xv * wv;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Decomposed relative-position bias for one head of a `height × width`
/// token set attending to itself: entry `(i, j)` is
/// `q_i · row[y_i − y_j + S − 1] + q_i · col[x_i − x_j + S − 1]`.
///
/// `queries` is `n × head_dim` (unscaled). Returns the `n × n` bias.
pub fn relpos_bias(
    queries: &[f32],
    height: usize,
    width: usize,
    tables: &RelPosTables,
) -> Result<Vec<f32>> {
    let s = tables.side;
    if s != height.max(width) {
        return Err(Error::invalid(format!(
            "relpos tables have side {s} but attended grid is {height}x{width}"
        )));
    }
    let hd = tables.head_dim;
    let n = height * width;
    if queries.len() != n * hd {
        return Err(Error::invalid("query buffer does not match grid and head dim"));
    }
    let mut rel_h = vec![0.0f32; n * height];
    let mut rel_w = vec![0.0f32; n * width];
    for i in 0..n {
        let (qy, qx) = (i / width, i % width);
        let q = &queries[i * hd..(i + 1) * hd];
        for ky in 0..height {
            rel_h[i * height + ky] = dot(q, tables.row_entry(qy + s - 1 - ky));
        }
        for kx in 0..width {
            rel_w[i * width + kx] = dot(q, tables.col_entry(qx + s - 1 - kx));
        }
    }
    let mut bias = vec![0.0f32; n * n];
    for i in 0..n {
        let row = &mut bias[i * n..(i + 1) * n];
        for ky in 0..height {
            let rh = rel_h[i * height + ky];
            for kx in 0..width {
                row[ky * width + kx] = rh + rel_w[i * width + kx];
            }
        }
    }
    Ok(bias)
}

/// Attention of a `height × width` token set (row-major, `n × dim`) with itself.
fn attend(
    tokens: &[f32],
    height: usize,
    width: usize,
    params: &AttentionParams,
    cfg: &AttentionLayerConfig,
) -> Result<Vec<f32>> {
    let dim = cfg.dim;
    let hd = cfg.head_dim();
    let n = height * width;
    let scale = 1.0 / libm::sqrtf(hd as f32);
    let qkv = linear(tokens, n, &params.qkv_w, &params.qkv_b, 3 * dim);
    let q_of = |i: usize, h: usize| &qkv[i * 3 * dim + h * hd..][..hd];
    let k_of = |j: usize, h: usize| &qkv[j * 3 * dim + dim + h * hd..][..hd];
    let v_of = |j: usize, h: usize| &qkv[j * 3 * dim + 2 * dim + h * hd..][..hd];

    let mut heads_out = vec![0.0f32; n * dim];
    let relpos = if cfg.use_relpos {
        Some(params.relpos.as_ref().ok_or_else(|| Error::invalid("relpos enabled but no tables"))?)
    } else {
        None
    };

    for h in 0..cfg.heads {
        match relpos {
            None => {
                let mut row = vec![0.0f32; n];
                for i in 0..n {
                    let q = q_of(i, h);
                    for (j, l) in row.iter_mut().enumerate() {
                        *l = dot(q, k_of(j, h)) * scale;
                    }
                    softmax_in_place(&mut row);
                    let out = &mut heads_out[i * dim + h * hd..][..hd];
                    for (j, &p) in row.iter().enumerate() {
                        for (o, &v) in out.iter_mut().zip(v_of(j, h)) {
                            *o += p * v;
                        }
                    }
                }
            }
            Some(tables) => {
                let queries: Vec<f32> = (0..n).flat_map(|i| q_of(i, h).iter().copied()).collect();
                let bias = relpos_bias(&queries, height, width, tables)?;
                let mut logits = vec![0.0f32; n * n];
                for i in 0..n {
                    let q = q_of(i, h);
                    for j in 0..n {
                        logits[i * n + j] = dot(q, k_of(j, h)) * scale;
                    }
                }
                for (l, b) in logits.iter_mut().zip(&bias) {
                    *l += b;
                }
                for i in 0..n {
                    let row = &mut logits[i * n..(i + 1) * n];
                    softmax_in_place(row);
                    let out = &mut heads_out[i * dim + h * hd..][..hd];
                    for (j, &p) in row.iter().enumerate() {
                        for (o, &v) in out.iter_mut().zip(v_of(j, h)) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
    }
    Ok(linear(&heads_out, n, &params.proj_w, &params.proj_b, dim))
}

/// Scaled dot-product multi-head self-attention with output projection.
/// Windowed configs partition the grid (zero-padding bottom/right), attend
/// within each window, and reassemble.
pub fn mhsa_forward(x: &Grid, params: &AttentionParams, cfg: &AttentionLayerConfig) -> Result<Grid> {
    cfg.validate()?;
    params.check(cfg)?;
    if x.channels() != cfg.dim {
        return Err(Error::invalid(format!(
            "input has {} channels but layer dim is {}",
            x.channels(),
            cfg.dim
        )));
    }
    match cfg.window_size {
        None => {
            let out = attend(x.data(), x.height(), x.width(), params, cfg)?;
            Grid::new(x.height(), x.width(), cfg.dim, out)
        }
        Some(ws) => {
            let layout = WindowLayout::new(ws, x.height(), x.width())?;
            let windows = window_partition(x, &layout)?;
            let outs = windows
                .iter()
                .map(|w| Grid::new(ws, ws, cfg.dim, attend(w.data(), ws, ws, params, cfg)?))
                .collect::<Result<Vec<_>>>()?;
            window_unpartition(&outs, &layout)
        }
    }
}

/// Channelwise 2×2 max pooling. Odd edges behave as if padded with the
/// lowest finite value.
pub fn pool2x2(x: &Grid) -> Grid {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = vec![f32::MIN; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut data[((y / 2) * ow + xx / 2) * c..][..c];
            for (d, &v) in dst.iter_mut().zip(x.token(y, xx)) {
                if v > *d {
                    *d = v;
                }
            }
        }
    }
    Grid::new(oh, ow, c, data).expect("max of finite values is finite")
}
