//! Straight-line scalar-loop re-implementation of the classification
//! forward pass, compared against the tape-based model.

use abswin_core::model::{EmbedMode, HeadKind, HieraLite, ModelSpec};
use abswin_core::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

struct Oracle<'a> {
    m: &'a HieraLite,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> &[f64] {
        &self.m.params().get(name).unwrap_or_else(|| panic!("missing {name}")).value
    }

    fn linear(&self, x: &Rows, w: &str, b: &str) -> Rows {
        let (w, b) = (self.p(w), self.p(b));
        let out = b.len();
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn norm(&self, x: &Rows, prefix: &str) -> Rows {
        let (g, b) = (self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter().enumerate().map(|(k, v)| (v - mean) / (var + 1e-6).sqrt() * g[k] + b[k]).collect()
            })
            .collect()
    }

    fn embedding(&self) -> Rows {
        let spec = self.m.spec();
        let side = spec.input_grid;
        match spec.embed_mode {
            EmbedMode::Naive => self.p("pos.full").chunks(spec.stage_dims[0]).map(|c| c.to_vec()).collect(),
            EmbedMode::AbsWin => {
                let (w, g, c) = (spec.window_size, spec.global_size, spec.stage_dims[0]);
                let (wp, gp) = (self.p("pos.window"), self.p("pos.global"));
                let mut out = Vec::new();
                for y in 0..side {
                    for x in 0..side {
                        let sy = (y as f64 + 0.5) * g as f64 / side as f64 - 0.5;
                        let sx = (x as f64 + 0.5) * g as f64 / side as f64 - 0.5;
                        let mut v: Vec<f64> = wp[((y % w) * w + x % w) * c..][..c].to_vec();
                        for m in -1i64..=2 {
                            for n in -1i64..=2 {
                                let ty = sy.floor() + m as f64;
                                let tx = sx.floor() + n as f64;
                                let k = cubic(sy - ty) * cubic(sx - tx);
                                let yy = (ty as i64).clamp(0, g as i64 - 1) as usize;
                                let xx = (tx as i64).clamp(0, g as i64 - 1) as usize;
                                for ch in 0..c {
                                    v[ch] += k * gp[(yy * g + xx) * c + ch];
                                }
                            }
                        }
                        out.push(v);
                    }
                }
                out
            }
        }
    }

    /// Attention over a square map of `side²` tokens (row-major), windowed
    /// with zero padding when `window` is set.
    fn attention(&self, h: &Rows, side: usize, window: Option<usize>, heads: usize, prefix: &str) -> Rows {
        let dim = h[0].len();
        let hd = dim / heads;
        let ws = window.unwrap_or(side);
        let padded = side.div_ceil(ws) * ws;
        let rel = self.m.params().get(&format!("{prefix}.attn.rel_h")).map(|_| {
            (self.p(&format!("{prefix}.attn.rel_h")).to_vec(), self.p(&format!("{prefix}.attn.rel_w")).to_vec())
        });
        let mut out = vec![vec![0.0; dim]; side * side];
        for wy in 0..padded / ws {
            for wx in 0..padded / ws {
                let cells: Vec<(usize, usize)> =
                    (0..ws * ws).map(|i| (wy * ws + i / ws, wx * ws + i % ws)).collect();
                let inputs: Rows = cells
                    .iter()
                    .map(|&(y, x)| if y < side && x < side { h[y * side + x].clone() } else { vec![0.0; dim] })
                    .collect();
                let qkv = self.linear(&inputs, &format!("{prefix}.attn.qkv.w"), &format!("{prefix}.attn.qkv.b"));
                for (i, &(y, x)) in cells.iter().enumerate() {
                    if y >= side || x >= side {
                        continue;
                    }
                    for head in 0..heads {
                        let q = &qkv[i][head * hd..(head + 1) * hd];
                        let mut logits = Vec::new();
                        for (j, &(ky, kx)) in cells.iter().enumerate() {
                            let k = &qkv[j][dim + head * hd..dim + (head + 1) * hd];
                            let mut l = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt();
                            if let Some((rh, rw)) = &rel {
                                let (ly, lx, lky, lkx) = (y % ws, x % ws, ky % ws, kx % ws);
                                let ry = ly + ws - 1 - lky;
                                let rx = lx + ws - 1 - lkx;
                                for d in 0..hd {
                                    l += q[d] * rh[ry * hd + d] + q[d] * rw[rx * hd + d];
                                }
                            }
                            logits.push(l);
                        }
                        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (j, p) in e.iter().enumerate() {
                            for d in 0..hd {
                                out[y * side + x][head * hd + d] += p / z * qkv[j][2 * dim + head * hd + d];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn block(&self, x: &Rows, side: usize, window: Option<usize>, heads: usize, prefix: &str) -> Rows {
        let h = self.norm(x, &format!("{prefix}.norm1"));
        let a = self.attention(&h, side, window, heads, prefix);
        let a = self.linear(&a, &format!("{prefix}.attn.proj.w"), &format!("{prefix}.attn.proj.b"));
        let x: Rows = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect();
        let h = self.norm(&x, &format!("{prefix}.norm2"));
        let h = self.linear(&h, &format!("{prefix}.mlp.fc1.w"), &format!("{prefix}.mlp.fc1.b"));
        let h: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let h = self.linear(&h, &format!("{prefix}.mlp.fc2.w"), &format!("{prefix}.mlp.fc2.b"));
        x.iter().zip(&h).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()
    }

    fn forward(&self, image: &Grid) -> Vec<f64> {
        let spec = self.m.spec();
        let mut side = spec.input_grid;
        let p = spec.patch_size;
        let pixels: Rows = (0..side * side)
            .map(|t| {
                let (ty, tx) = (t / side, t % side);
                let mut v = Vec::new();
                for dy in 0..p {
                    for dx in 0..p {
                        v.extend(image.token(ty * p + dy, tx * p + dx).iter().map(|&f| f as f64));
                    }
                }
                v
            })
            .collect();
        let emb = self.embedding();
        let x = self.linear(&pixels, "patch.w", "patch.b");
        let mut x: Rows = x.iter().zip(&emb).map(|(r, e)| r.iter().zip(e).map(|(u, v)| u + v).collect()).collect();
        let mut b = 0;
        for s in 0..spec.stages() {
            if s > 0 {
                let y = self.linear(&x, &format!("stages.{s}.proj.w"), &format!("stages.{s}.proj.b"));
                let ns = side.div_ceil(2);
                let mut pooled = vec![vec![f64::NEG_INFINITY; y[0].len()]; ns * ns];
                for (t, row) in y.iter().enumerate() {
                    let cell = (t / side / 2) * ns + (t % side) / 2;
                    for (k, v) in row.iter().enumerate() {
                        pooled[cell][k] = pooled[cell][k].max(*v);
                    }
                }
                x = pooled;
                side = ns;
            }
            for _ in 0..spec.stage_depths[s] {
                x = self.block(&x, side, spec.block_window(b), spec.stage_heads[s], &format!("blocks.{b}"));
                b += 1;
            }
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..x[0].len()).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let pooled = self.norm(&vec![mean], "norm");
        self.linear(&pooled, "head.w", "head.b").remove(0)
    }
}

fn cubic(x: f64) -> f64 {
    let a = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn randomize(m: &mut HieraLite, rng: &mut ChaCha8Rng) {
    for p in m.params_mut().iter_mut() {
        for v in p.value.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn check(spec: ModelSpec, seed: u64, grids: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = HieraLite::new(spec, &mut rng).unwrap();
    randomize(&mut base, &mut rng);
    for &g in grids {
        let mut m = base.adapt_resolution(g).unwrap();
        randomize(&mut m, &mut rng);
        let side = m.spec().image_side();
        let img = Grid::from_fn(side, side, m.spec().in_channels, |_, _, _| rng.gen_range(-1.0..1.0));
        let fast = m.forward_classify(&img).unwrap();
        let slow = Oracle { m: &m }.forward(&img);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "grid {g}: {fast:?} vs {slow:?}");
        }
    }
}

fn tiny() -> ModelSpec {
    ModelSpec {
        input_grid: 8,
        stage_depths: vec![2],
        stage_dims: vec![16],
        stage_heads: vec![2],
        stage_window_sizes: vec![Some(4)],
        head: HeadKind::Classify { classes: 4 },
        ..ModelSpec::toy()
    }
}

#[test]
fn tiny_single_stage_matches_oracle() {
    check(tiny(), 0, &[8]);
    check(ModelSpec { embed_mode: EmbedMode::Naive, ..tiny() }, 1, &[8]);
}

#[test]
fn two_stage_with_padding_and_global_layers() {
    let spec = ModelSpec {
        input_grid: 8,
        stage_depths: vec![2, 2],
        stage_dims: vec![8, 16],
        stage_heads: vec![2, 4],
        stage_window_sizes: vec![Some(4), None],
        global_layer_indices: vec![1],
        ..tiny()
    };
    check(spec.clone(), 2, &[8, 10, 11]);
    check(ModelSpec { embed_mode: EmbedMode::Naive, ..spec }, 3, &[9]);
}

#[test]
fn relpos_on_global_layers_matches_oracle() {
    let spec = ModelSpec {
        stage_depths: vec![1, 1],
        stage_dims: vec![8, 8],
        stage_heads: vec![2, 2],
        stage_window_sizes: vec![Some(4), None],
        relpos_global: true,
        ..tiny()
    };
    check(spec, 4, &[8, 10]);
}

#[test]
fn patch_size_two() {
    check(ModelSpec { patch_size: 2, input_grid: 4, window_size: 2, global_size: 2, stage_window_sizes: vec![Some(2)], ..tiny() }, 5, &[4, 5]);
}
