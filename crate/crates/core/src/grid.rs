//! Dense `H×W×C` grids of `f32` and the spatial operations the rest of the
//! crate is built on: bicubic resampling, tiling, cropping, window
//! partitioning and cosine similarity.
//!
//! Storage is row-major with channels innermost, so `data[(y * W + x) * C + c]`.
//! Resampling and similarity accumulate in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Sharpness constant of the cubic convolution kernel.
pub const CUBIC_A: f64 = -0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    /// Wraps `data` as a grid, checking its length and that every value is finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "grid data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid value at flat index {i}")));
        }
        Ok(Grid { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(value.is_finite());
        Grid { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds a grid from `f(y, x, c)`. Panics if `f` returns a non-finite value.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(y, x, c);
                    assert!(v.is_finite(), "non-finite value at ({y}, {x}, {c})");
                    data.push(v);
                }
            }
        }
        Grid { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        assert!(value.is_finite());
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = value;
    }

    /// Channel vector of one token.
    #[inline]
    pub fn token(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Grid::new(self.height, self.width, self.channels, data)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Grid::new(self.height, self.width, self.channels, data)
    }

    pub fn scale(&self, factor: f32) -> Result<Grid> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Grid::new(self.height, self.width, self.channels, data)
    }

    /// Largest absolute elementwise difference; `f32::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Grid) -> f32 {
        if !self.same_shape(other) {
            return f32::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// One channel as a row-major `H×W` plane.
    pub fn channel_plane(&self, c: usize) -> Result<Vec<f32>> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {} channels",
                self.channels
            )));
        }
        Ok(self.data.iter().skip(c).step_by(self.channels).copied().collect())
    }
}

/// Cubic convolution kernel with constant [`CUBIC_A`].
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source coordinate of output sample `dst` under half-pixel-center mapping.
#[inline]
pub fn source_coordinate(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

/// Per-axis bicubic sampling weights: for every output index, four clamped
/// source taps and their kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    in_len: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl AxisWeights {
    pub fn new(in_len: usize, out_len: usize) -> Result<Self> {
        if in_len == 0 || out_len == 0 {
            return Err(Error::invalid("resize axis lengths must be >= 1"));
        }
        let last = (in_len - 1) as isize;
        let taps = (0..out_len)
            .map(|o| {
                let s = source_coordinate(o, in_len, out_len);
                let base = libm::floor(s);
                let t = s - base;
                let base = base as isize;
                let mut row = [(0usize, 0.0f64); 4];
                for (k, slot) in row.iter_mut().enumerate() {
                    let offset = k as isize - 1;
                    let idx = (base + offset).clamp(0, last) as usize;
                    *slot = (idx, cubic_kernel(t - offset as f64));
                }
                row
            })
            .collect();
        Ok(AxisWeights { in_len, taps })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, out: usize) -> &[(usize, f64); 4] {
        &self.taps[out]
    }

    /// Dense `out_len × in_len` interpolation matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.taps.len() * self.in_len];
        for (o, row) in self.taps.iter().enumerate() {
            for &(i, w) in row {
                m[o * self.in_len + i] += w;
            }
        }
        m
    }
}

/// Applies separable bicubic weights to a row-major `in_h × in_w × channels`
/// buffer of `f64`, producing `out_h × out_w × channels`.
pub fn resample_separable(
    src: &[f64],
    channels: usize,
    rows: &AxisWeights,
    cols: &AxisWeights,
) -> Vec<f64> {
    let (in_h, in_w) = (rows.in_len(), cols.in_len());
    let (out_h, out_w) = (rows.out_len(), cols.out_len());
    debug_assert_eq!(src.len(), in_h * in_w * channels);
    // horizontal pass: in_h × out_w
    let mut mid = vec![0.0f64; in_h * out_w * channels];
    for y in 0..in_h {
        for ox in 0..out_w {
            let dst = &mut mid[(y * out_w + ox) * channels..][..channels];
            for &(sx, w) in cols.taps(ox) {
                let s = &src[(y * in_w + sx) * channels..][..channels];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; out_h * out_w * channels];
    for oy in 0..out_h {
        for &(sy, w) in rows.taps(oy) {
            let s = &mid[sy * out_w * channels..][..out_w * channels];
            let d = &mut out[oy * out_w * channels..][..out_w * channels];
            for (d, v) in d.iter_mut().zip(s) {
                *d += w * v;
            }
        }
    }
    out
}

/// Bicubic resampling with half-pixel-center mapping and clamp-to-edge borders.
pub fn bicubic_resize(src: &Grid, out_height: usize, out_width: usize) -> Result<Grid> {
    if src.is_empty() {
        return Err(Error::invalid("cannot resize an empty grid"));
    }
    if out_height == 0 || out_width == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let rows = AxisWeights::new(src.height, out_height)?;
    let cols = AxisWeights::new(src.width, out_width)?;
    let wide: Vec<f64> = src.data.iter().map(|&v| v as f64).collect();
    let out = resample_separable(&wide, src.channels, &rows, &cols);
    Grid::new(out_height, out_width, src.channels, out.into_iter().map(|v| v as f32).collect())
}

/// Repeats `src` `reps_h` times vertically and `reps_w` times horizontally.
pub fn tile(src: &Grid, reps_h: usize, reps_w: usize) -> Result<Grid> {
    if reps_h == 0 || reps_w == 0 {
        return Err(Error::invalid("tile repetitions must be >= 1"));
    }
    let (h, w, c) = (src.height, src.width, src.channels);
    let out_w = w * reps_w;
    let mut data = Vec::with_capacity(h * reps_h * out_w * c);
    for _ in 0..reps_h {
        for y in 0..h {
            let row = &src.data[y * w * c..(y + 1) * w * c];
            for _ in 0..reps_w {
                data.extend_from_slice(row);
            }
        }
    }
    Ok(Grid { height: h * reps_h, width: out_w, channels: c, data })
}

/// Copies the `h×w` rectangle whose top-left corner is `(row0, col0)`.
pub fn crop(src: &Grid, row0: usize, col0: usize, h: usize, w: usize) -> Result<Grid> {
    if row0 + h > src.height || col0 + w > src.width {
        return Err(Error::invalid(format!(
            "crop {h}x{w} at ({row0}, {col0}) exceeds {}x{} grid",
            src.height, src.width
        )));
    }
    let c = src.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for y in row0..row0 + h {
        let start = (y * src.width + col0) * c;
        data.extend_from_slice(&src.data[start..start + w * c]);
    }
    Ok(Grid { height: h, width: w, channels: c, data })
}

/// Geometry of a non-overlapping window partition, padded at bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl WindowLayout {
    pub fn new(window_size: usize, grid_height: usize, grid_width: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::invalid("window size must be >= 1"));
        }
        if grid_height == 0 || grid_width == 0 {
            return Err(Error::invalid("window layout over an empty grid"));
        }
        let pad = |n: usize| (window_size - n % window_size) % window_size;
        Ok(WindowLayout {
            window_size,
            grid_height,
            grid_width,
            pad_bottom: pad(grid_height),
            pad_right: pad(grid_width),
        })
    }

    pub fn padded_height(&self) -> usize {
        self.grid_height + self.pad_bottom
    }

    pub fn padded_width(&self) -> usize {
        self.grid_width + self.pad_right
    }

    pub fn windows_h(&self) -> usize {
        self.padded_height() / self.window_size
    }

    pub fn windows_w(&self) -> usize {
        self.padded_width() / self.window_size
    }

    pub fn window_count(&self) -> usize {
        self.windows_h() * self.windows_w()
    }
}

/// Splits `src` into `window_size × window_size` windows in row-major window
/// order, zero-padding the bottom/right edges.
pub fn window_partition(src: &Grid, layout: &WindowLayout) -> Result<Vec<Grid>> {
    if src.height != layout.grid_height || src.width != layout.grid_width {
        return Err(Error::invalid(format!(
            "layout is for {}x{} but grid is {}x{}",
            layout.grid_height, layout.grid_width, src.height, src.width
        )));
    }
    let ws = layout.window_size;
    let c = src.channels;
    let mut windows = Vec::with_capacity(layout.window_count());
    for wy in 0..layout.windows_h() {
        for wx in 0..layout.windows_w() {
            let mut data = vec![0.0f32; ws * ws * c];
            for dy in 0..ws {
                let y = wy * ws + dy;
                if y >= src.height {
                    break;
                }
                for dx in 0..ws {
                    let x = wx * ws + dx;
                    if x >= src.width {
                        break;
                    }
                    data[(dy * ws + dx) * c..][..c].copy_from_slice(src.token(y, x));
                }
            }
            windows.push(Grid { height: ws, width: ws, channels: c, data });
        }
    }
    Ok(windows)
}

/// Reassembles windows produced by [`window_partition`] and crops the padding.
pub fn window_unpartition(windows: &[Grid], layout: &WindowLayout) -> Result<Grid> {
    if windows.len() != layout.window_count() {
        return Err(Error::invalid(format!(
            "expected {} windows, got {}",
            layout.window_count(),
            windows.len()
        )));
    }
    let ws = layout.window_size;
    let c = windows.first().map(|w| w.channels).unwrap_or(0);
    if windows.iter().any(|w| w.height != ws || w.width != ws || w.channels != c) {
        return Err(Error::invalid("inconsistent window shapes"));
    }
    let mut out = Grid::zeros(layout.grid_height, layout.grid_width, c);
    let nw = layout.windows_w();
    for (i, win) in windows.iter().enumerate() {
        let (wy, wx) = (i / nw, i % nw);
        for dy in 0..ws {
            let y = wy * ws + dy;
            if y >= layout.grid_height {
                break;
            }
            for dx in 0..ws {
                let x = wx * ws + dx;
                if x >= layout.grid_width {
                    break;
                }
                let dst = (y * out.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(win.token(dy, dx));
            }
        }
    }
    Ok(out)
}

/// Cosine of two flat vectors, accumulated in `f64`. Zero-norm inputs give 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / libm::sqrt(na * nb)).clamp(-1.0, 1.0))
}
