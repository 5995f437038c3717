//! Position-embedding constructions and resize strategies.
//!
//! * [`NaiveEmbed`]: one learned vector per token, resized by plain bicubic
//!   interpolation. Interpolating a window-periodic embedding this way shifts
//!   its period off the window grid.
//! * [`AbsWinEmbed`]: a window-sized part that is tiled and a coarse global
//!   part that is interpolated; their sum is the full embedding. Resizing only
//!   ever resamples the global part, so every window keeps its learned content.
//! * [`detection_tile`] and [`recursive_abswin`] reuse a whole pretrained
//!   embedding as the window part of a larger grid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{bicubic_resize, cosine_similarity, crop, tile, Grid};

/// Standard deviation used to initialise learnable embedding parts.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveEmbed {
    pub grid: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsWinEmbed {
    window: Grid,
    global: Grid,
}

impl AbsWinEmbed {
    pub fn new(window: Grid, global: Grid) -> Result<Self> {
        if window.height() != window.width() || window.height() == 0 {
            return Err(Error::invalid("window part must be a non-empty square"));
        }
        if global.height() != global.width() || global.height() == 0 {
            return Err(Error::invalid("global part must be a non-empty square"));
        }
        if window.channels() != global.channels() {
            return Err(Error::invalid(format!(
                "window part has {} channels, global part {}",
                window.channels(),
                global.channels()
            )));
        }
        Ok(AbsWinEmbed { window, global })
    }

    /// Both parts drawn from a truncated normal with std [`INIT_STD`].
    pub fn random<R: Rng + ?Sized>(
        window_size: usize,
        global_size: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let window = trunc_normal_grid(window_size, window_size, channels, INIT_STD, rng);
        let global = trunc_normal_grid(global_size, global_size, channels, INIT_STD, rng);
        Self::new(window, global)
    }

    pub fn window(&self) -> &Grid {
        &self.window
    }

    pub fn global(&self) -> &Grid {
        &self.global
    }

    pub fn window_size(&self) -> usize {
        self.window.height()
    }

    pub fn global_size(&self) -> usize {
        self.global.height()
    }

    pub fn channels(&self) -> usize {
        self.window.channels()
    }
}

/// Tiles the window part over `out_h × out_w` (cropping at the bottom/right)
/// and adds the global part bicubically resized to the same size.
pub fn materialize_abswin(e: &AbsWinEmbed, out_h: usize, out_w: usize) -> Result<Grid> {
    if e.window.channels() != e.global.channels() {
        return Err(Error::invalid("window/global channel mismatch"));
    }
    let tiled = tile_to(&e.window, out_h, out_w)?;
    let global = bicubic_resize(&e.global, out_h, out_w)?;
    tiled.add(&global)
}

/// Buggy baseline: bicubic interpolation of the whole embedding.
pub fn resize_naive(e: &NaiveEmbed, out_h: usize, out_w: usize) -> Result<Grid> {
    bicubic_resize(&e.grid, out_h, out_w)
}

/// Resizing an absolute-win embedding is re-materialising it at the new size.
pub fn resize_abswin(e: &AbsWinEmbed, out_h: usize, out_w: usize) -> Result<Grid> {
    materialize_abswin(e, out_h, out_w)
}

/// Tiles a pretrained `p×p` embedding over the output grid instead of
/// interpolating it.
pub fn detection_tile(pretrained: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if pretrained.is_empty() {
        return Err(Error::invalid("pretrained embedding is empty"));
    }
    tile_to(pretrained, out_h, out_w)
}

/// Materialises `base` at `base_res` and tiles the result as the window part
/// of an `out_h × out_w` grid.
pub fn recursive_abswin(
    base: &AbsWinEmbed,
    base_res: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Grid> {
    if base_res == 0 || base_res % base.window_size() != 0 {
        return Err(Error::invalid(format!(
            "base resolution {base_res} is not a multiple of window size {}",
            base.window_size()
        )));
    }
    let inner = materialize_abswin(base, base_res, base_res)?;
    detection_tile(&inner, out_h, out_w)
}

fn tile_to(src: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be at least 1x1"));
    }
    let reps_h = out_h.div_ceil(src.height());
    let reps_w = out_w.div_ceil(src.width());
    crop(&tile(src, reps_h, reps_w)?, 0, 0, out_h, out_w)
}

/// Flattened complete `window_size × window_size` blocks in row-major order.
/// Partial blocks at the bottom/right edges are dropped.
pub fn complete_windows(embed: &Grid, window_size: usize) -> Result<Vec<Vec<f32>>> {
    if window_size == 0 || window_size > embed.height() || window_size > embed.width() {
        return Err(Error::invalid(format!(
            "window {window_size} does not fit a {}x{} grid",
            embed.height(),
            embed.width()
        )));
    }
    let (nh, nw) = (embed.height() / window_size, embed.width() / window_size);
    let mut out = Vec::with_capacity(nh * nw);
    for wy in 0..nh {
        for wx in 0..nw {
            let block = crop(embed, wy * window_size, wx * window_size, window_size, window_size)?;
            out.push(block.into_data());
        }
    }
    Ok(out)
}

/// Mean pairwise cosine similarity of the complete windows of `embed`.
/// A single window scores 1.0.
pub fn window_similarity(embed: &Grid, window_size: usize) -> Result<f64> {
    let windows = complete_windows(embed, window_size)?;
    if windows.len() < 2 {
        return Ok(1.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..windows.len() {
        for j in i + 1..windows.len() {
            total += cosine_similarity(&windows[i], &windows[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Dense symmetric token-to-token similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }
}

/// Cosine similarity between every pair of token vectors of a square part.
/// Tokens are numbered row-major.
pub fn token_similarity_maps(part: &Grid) -> Result<SimilarityMatrix> {
    if part.height() != part.width() {
        return Err(Error::invalid(format!(
            "token maps need a square part, got {}x{}",
            part.height(),
            part.width()
        )));
    }
    let c = part.channels();
    let n = part.height() * part.width();
    let token = |i: usize| &part.data()[i * c..(i + 1) * c];
    let mut values = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = cosine_similarity(token(i), token(j))?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { size: n, values })
}

/// Samples a normal with the given std, redrawing anything beyond two std.
pub fn trunc_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub fn trunc_normal_grid<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    channels: usize,
    std: f64,
    rng: &mut R,
) -> Grid {
    Grid::from_fn(height, width, channels, |_, _, _| trunc_normal(std, rng) as f32)
}

/// Fixed 2-D sine/cosine embedding: the first half of the channels encodes
/// rows, the second half columns. `channels` must be a multiple of 4.
pub fn sinusoidal_grid(height: usize, width: usize, channels: usize) -> Result<Grid> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::invalid("sinusoidal embedding needs channels divisible by 4"));
    }
    let quarter = channels / 4;
    Ok(Grid::from_fn(height, width, channels, |y, x, c| {
        let (pos, c) = if c < 2 * quarter { (y, c) } else { (x, c - 2 * quarter) };
        let k = c % quarter;
        let omega = 1.0 / libm::pow(10_000.0, k as f64 / quarter as f64);
        let arg = pos as f64 * omega;
        (if c < quarter { libm::sin(arg) } else { libm::cos(arg) }) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn window_blocks_match(result: &Grid, global: &Grid, window: &Grid) -> bool {
        let diff = result.sub(&bicubic_resize(global, result.height(), result.width()).unwrap()).unwrap();
        complete_windows(&diff, window.height())
            .unwrap()
            .iter()
            .all(|b| b.iter().zip(window.data()).all(|(a, w)| (a - w).abs() <= 1e-6))
    }

    #[test]
    fn materialize_full_scale_geometry() {
        let e = AbsWinEmbed::random(8, 7, 6, &mut rng(1)).unwrap();
        let m = materialize_abswin(&e, 56, 56).unwrap();
        assert_eq!((m.height(), m.width(), m.channels()), (56, 56, 6));
        assert!(window_blocks_match(&m, e.global(), e.window()));
    }

    #[test]
    fn zero_global_is_exact_tiling() {
        let mut r = rng(2);
        let window = trunc_normal_grid(4, 4, 3, 1.0, &mut r);
        let e = AbsWinEmbed::new(window.clone(), Grid::zeros(3, 3, 3)).unwrap();
        let m = materialize_abswin(&e, 12, 8).unwrap();
        assert_eq!(m, tile(&window, 3, 2).unwrap());
        assert_eq!(window_similarity(&m, 4).unwrap(), 1.0);
    }

    #[test]
    fn non_multiple_output_crops() {
        let mut r = rng(3);
        let window = trunc_normal_grid(8, 8, 2, 1.0, &mut r);
        let e = AbsWinEmbed::new(window.clone(), Grid::zeros(2, 2, 2)).unwrap();
        let m = materialize_abswin(&e, 20, 20).unwrap();
        assert_eq!(crop(&m, 0, 0, 8, 8).unwrap(), window);
        // boundary block (rows 16..20) is the top half of the window
        assert_eq!(crop(&m, 16, 8, 4, 8).unwrap(), crop(&window, 0, 0, 4, 8).unwrap());
        assert_eq!(crop(&m, 16, 16, 4, 4).unwrap(), crop(&window, 0, 0, 4, 4).unwrap());
    }

    #[test]
    fn channel_mismatch_rejected() {
        assert!(AbsWinEmbed::new(Grid::zeros(4, 4, 2), Grid::zeros(3, 3, 3)).is_err());
        assert!(AbsWinEmbed::new(Grid::zeros(4, 3, 2), Grid::zeros(3, 3, 2)).is_err());
    }

    #[test]
    fn resize_abswin_same_size_equals_materialize() {
        let e = AbsWinEmbed::random(4, 4, 5, &mut rng(4)).unwrap();
        assert_eq!(resize_abswin(&e, 16, 16).unwrap(), materialize_abswin(&e, 16, 16).unwrap());
        let e0 = AbsWinEmbed::new(Grid::zeros(4, 4, 5), e.global().clone()).unwrap();
        assert_eq!(resize_abswin(&e0, 20, 20).unwrap(), bicubic_resize(e.global(), 20, 20).unwrap());
    }

    #[test]
    fn naive_resize_breaks_tiling() {
        let window = trunc_normal_grid(4, 4, 8, 1.0, &mut rng(5));
        let tiled = tile(&window, 4, 4).unwrap();
        assert_eq!(window_similarity(&tiled, 4).unwrap(), 1.0);
        let e = NaiveEmbed { grid: tiled.clone() };
        assert_eq!(resize_naive(&e, 16, 16).unwrap(), tiled);
        let resized = resize_naive(&e, 20, 20).unwrap();
        assert!(window_similarity(&resized, 4).unwrap() < 1.0);
        let c = NaiveEmbed { grid: Grid::filled(16, 16, 2, 0.3) };
        assert!(resize_naive(&c, 20, 20).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn detection_tile_vitdet_geometry() {
        let p = trunc_normal_grid(14, 14, 4, 1.0, &mut rng(6));
        let d = detection_tile(&p, 64, 64).unwrap();
        assert_eq!(crop(&d, 0, 0, 14, 14).unwrap(), p);
        assert_eq!(crop(&d, 42, 28, 14, 14).unwrap(), p);
        assert_eq!(detection_tile(&p, 14, 14).unwrap(), p);
    }

    #[test]
    fn detection_tile_small_brute_force() {
        let p = trunc_normal_grid(4, 4, 3, 1.0, &mut rng(7));
        let d = detection_tile(&p, 10, 10).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(d.token(y, x), p.token(y % 4, x % 4));
            }
        }
    }

    #[test]
    fn recursive_matches_composition() {
        let base = AbsWinEmbed::random(4, 4, 3, &mut rng(8)).unwrap();
        let r = recursive_abswin(&base, 16, 20, 20).unwrap();
        let inner = materialize_abswin(&base, 16, 16).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(r.token(y, x), inner.token(y % 16, x % 16));
            }
        }
        assert_eq!(recursive_abswin(&base, 16, 16, 16).unwrap(), inner);
        assert!(recursive_abswin(&base, 18, 20, 20).is_err());
    }

    #[test]
    fn window_similarity_errors_and_single_window() {
        let g = Grid::filled(4, 4, 1, 1.0);
        assert_eq!(window_similarity(&g, 4).unwrap(), 1.0);
        assert!(window_similarity(&g, 5).is_err());
        assert!(window_similarity(&g, 0).is_err());
    }

    #[test]
    fn window_similarity_scale_invariant() {
        let g = trunc_normal_grid(8, 8, 3, 1.0, &mut rng(9));
        let a = window_similarity(&g, 4).unwrap();
        let b = window_similarity(&g.scale(3.5).unwrap(), 4).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn token_maps_hand_case() {
        // tokens carry their (x, y) coordinates
        let part = Grid::from_fn(2, 2, 2, |y, x, c| if c == 0 { x as f32 } else { y as f32 });
        let m = token_similarity_maps(&part).unwrap();
        assert_eq!(m.size, 4);
        // token 0 is the zero vector
        assert_eq!(m.get(0, 1), 0.0);
        assert!((m.get(1, 2) - 0.0).abs() < 1e-12); // (1,0) vs (0,1)
        let s = core::f64::consts::FRAC_1_SQRT_2;
        assert!((m.get(1, 3) - s).abs() < 1e-12); // (1,0) vs (1,1)
        assert!((m.get(2, 3) - s).abs() < 1e-12);
        assert!((m.get(3, 3) - 1.0).abs() < 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert!(token_similarity_maps(&Grid::zeros(2, 3, 1)).is_err());
    }

    #[test]
    fn sinusoidal_is_deterministic() {
        let a = sinusoidal_grid(4, 6, 8).unwrap();
        assert_eq!(a, sinusoidal_grid(4, 6, 8).unwrap());
        assert_eq!(a.at(0, 0, 0), 0.0);
        assert_eq!(a.at(0, 0, 2), 1.0);
        assert!(sinusoidal_grid(4, 4, 6).is_err());
    }

    #[test]
    fn trunc_normal_bounds() {
        let mut r = rng(10);
        for _ in 0..1000 {
            assert!(trunc_normal(0.02, &mut r).abs() <= 0.04);
        }
    }
}
