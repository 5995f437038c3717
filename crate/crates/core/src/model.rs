//! A small multi-stage windowed vision transformer.
//!
//! Patchify, add a position embedding, run stages of pre-norm transformer
//! blocks (window or global attention), max-pool 2×2 between stages, then
//! either mean-pool into a linear classifier or decode masked mask units for
//! masked-autoencoder reconstruction.
//!
//! Tokens travel through the network as rows of a matrix plus a coordinate
//! per row, which lets the masked path drop whole mask units before the
//! encoder and still group windows, pool, and place relative offsets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, RelPosSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{resample_separable, AxisWeights, Grid};
use crate::params::ParamStore;
use crate::posembed::{trunc_normal, AbsWinEmbed, NaiveEmbed, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedMode {
    Naive,
    AbsWin,
}

impl EmbedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMode::Naive => "naive",
            EmbedMode::AbsWin => "abswin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "naive" => Some(EmbedMode::Naive),
            "abswin" => Some(EmbedMode::AbsWin),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    Classify { classes: usize },
    Mae { mask_ratio: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Tokens per side at the current resolution.
    pub input_grid: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// Window side per stage in that stage's tokens; `None` is global.
    pub stage_window_sizes: Vec<Option<usize>>,
    /// Block indices (counted across stages) forced to global attention.
    pub global_layer_indices: Vec<usize>,
    /// Decomposed relpos on global-attention blocks.
    pub relpos_global: bool,
    pub mlp_ratio: usize,
    pub embed_mode: EmbedMode,
    /// Embedding window / mask unit side, in input tokens.
    pub window_size: usize,
    /// Side of the global embedding part.
    pub global_size: usize,
    pub head: HeadKind,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl ModelSpec {
    /// Desk-scale defaults: 16×16 tokens, window 4, two stages of depth 2
    /// with dims 32/64, the second stage global.
    pub fn toy() -> Self {
        ModelSpec {
            input_grid: 16,
            patch_size: 1,
            in_channels: 3,
            stage_depths: vec![2, 2],
            stage_dims: vec![32, 64],
            stage_heads: vec![2, 4],
            stage_window_sizes: vec![Some(4), None],
            global_layer_indices: Vec::new(),
            relpos_global: false,
            mlp_ratio: 2,
            embed_mode: EmbedMode::AbsWin,
            window_size: 4,
            global_size: 4,
            head: HeadKind::Classify { classes: 4 },
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 2,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        (0..stage).fold(self.input_grid, |s, _| s.div_ceil(2))
    }

    pub fn image_side(&self) -> usize {
        self.input_grid * self.patch_size
    }

    /// Attention window for block `b` (`None` = global).
    pub fn block_window(&self, b: usize) -> Option<usize> {
        if self.global_layer_indices.contains(&b) {
            return None;
        }
        self.stage_window_sizes[self.block_stage(b)]
    }

    pub fn block_stage(&self, b: usize) -> usize {
        let mut acc = 0;
        for (s, &d) in self.stage_depths.iter().enumerate() {
            acc += d;
            if b < acc {
                return s;
            }
        }
        self.stages() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::invalid("model needs at least one stage"));
        }
        if self.stage_dims.len() != n || self.stage_heads.len() != n || self.stage_window_sizes.len() != n {
            return Err(Error::invalid("per-stage lists must have equal length"));
        }
        if self.stage_dims.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("stage dims must be non-decreasing"));
        }
        for s in 0..n {
            let (d, h) = (self.stage_dims[s], self.stage_heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::invalid(format!("stage {s}: dim {d} not divisible by {h} heads")));
            }
            if self.stage_window_sizes[s] == Some(0) {
                return Err(Error::invalid("window sizes must be >= 1"));
            }
        }
        if let Some(&b) = self.global_layer_indices.iter().find(|&&b| b >= self.total_blocks()) {
            return Err(Error::invalid(format!("global layer index {b} beyond depth {}", self.total_blocks())));
        }
        if self.input_grid == 0 || self.patch_size == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("grid, patch size, channels and mlp ratio must be >= 1"));
        }
        if self.window_size == 0 || self.global_size == 0 {
            return Err(Error::invalid("embedding window and global sizes must be >= 1"));
        }
        match self.head {
            HeadKind::Classify { classes } if classes < 2 => {
                return Err(Error::invalid("classification needs at least two classes"))
            }
            HeadKind::Mae { mask_ratio } if !(0.0..1.0).contains(&mask_ratio) => {
                return Err(Error::invalid("mask ratio must be in [0, 1)"))
            }
            HeadKind::Mae { .. } => {
                let d = self.decoder_dim;
                if d == 0 || self.decoder_heads == 0 || d % self.decoder_heads != 0 {
                    return Err(Error::invalid("decoder dim must be divisible by decoder heads"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that apply at the pretraining resolution.
    pub fn validate_for_pretraining(&self) -> Result<()> {
        self.validate()?;
        if self.input_grid % self.window_size != 0 {
            return Err(Error::invalid(format!(
                "window size {} must divide the pretraining grid {}",
                self.window_size, self.input_grid
            )));
        }
        if let HeadKind::Mae { .. } = self.head {
            let shrink = 1usize << (self.stages() - 1);
            if self.window_size % shrink != 0 {
                return Err(Error::invalid("mask units must survive pooling: window size not divisible by 2^(stages-1)"));
            }
        }
        Ok(())
    }

    fn pixels_per_final_token(&self) -> usize {
        (1usize << (self.stages() - 1)) * self.patch_size
    }
}

/// Where the position embedding comes from in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum EmbedSource<'a> {
    /// The model's own (learnable) embedding parameters.
    Learned,
    /// A fixed, already materialised embedding at the input grid.
    Fixed(&'a Grid),
}

#[derive(Clone, Debug)]
struct TokenSet {
    x: Var,
    coords: Vec<(usize, usize)>,
    side: usize,
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
    let normal = Normal::new(0.0, std).unwrap();
    (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
}

fn trunc_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| trunc_normal(INIT_STD, rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HieraLite {
    spec: ModelSpec,
    params: ParamStore,
}

impl HieraLite {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let d0 = spec.stage_dims[0];
        let patch_in = spec.patch_size * spec.patch_size * spec.in_channels;
        params.insert("patch.w", patch_in, d0, glorot(patch_in, d0, rng), true, 0)?;
        params.insert("patch.b", 1, d0, vec![0.0; d0], false, 0)?;
        insert_position_params(&spec, &mut params, rng)?;

        let mut b = 0;
        for s in 0..spec.stages() {
            let dim = spec.stage_dims[s];
            if s > 0 {
                let prev = spec.stage_dims[s - 1];
                let prefix = format!("stages.{s}.proj");
                params.insert(&format!("{prefix}.w"), prev, dim, glorot(prev, dim, rng), true, b + 1)?;
                params.insert(&format!("{prefix}.b"), 1, dim, vec![0.0; dim], false, b + 1)?;
            }
            for _ in 0..spec.stage_depths[s] {
                let prefix = format!("blocks.{b}");
                insert_block_params(&mut params, &prefix, dim, spec.mlp_ratio, b + 1, rng)?;
                if let Some(side) = relpos_side(&spec, b) {
                    insert_relpos(&mut params, &prefix, side, dim / spec.stage_heads[s], b + 1)?;
                }
                b += 1;
            }
        }
        let mut model = HieraLite { spec, params };
        model.insert_head(rng)?;
        Ok(model)
    }

    /// Reassembles a model from a spec and a parameter store, checking that
    /// every parameter the spec needs is present with the right shape.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = HieraLite::new(spec.clone(), &mut rng)?;
        for p in reference.params.iter() {
            let q = params.require(&p.name)?;
            if (q.rows, q.cols) != (p.rows, p.cols) {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {}x{}, expected {}x{}",
                    p.name, q.rows, q.cols, p.rows, p.cols
                )));
            }
        }
        Ok(HieraLite { spec, params })
    }

    fn insert_head<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let spec = &self.spec;
        let last = *spec.stage_dims.last().unwrap();
        let top = spec.total_blocks() + 1;
        let params = &mut self.params;
        match spec.head {
            HeadKind::Classify { classes } => {
                params.insert("norm.g", 1, last, vec![1.0; last], false, top)?;
                params.insert("norm.b", 1, last, vec![0.0; last], false, top)?;
                params.insert("head.w", last, classes, glorot(last, classes, rng), true, top)?;
                params.insert("head.b", 1, classes, vec![0.0; classes], false, top)?;
            }
            HeadKind::Mae { .. } => {
                let dd = spec.decoder_dim;
                let side = spec.stage_side(spec.stages() - 1);
                let px = spec.pixels_per_final_token();
                let out = px * px * spec.in_channels;
                params.insert("decoder.embed.w", last, dd, glorot(last, dd, rng), true, top)?;
                params.insert("decoder.embed.b", 1, dd, vec![0.0; dd], false, top)?;
                params.insert("decoder.mask_token", 1, dd, trunc_normal_vec(dd, rng), false, top)?;
                params.insert("decoder.pos", side * side, dd, trunc_normal_vec(side * side * dd, rng), false, top)?;
                for i in 0..spec.decoder_depth {
                    insert_block_params(params, &format!("decoder.blocks.{i}"), dd, spec.mlp_ratio, top, rng)?;
                }
                params.insert("decoder.norm.g", 1, dd, vec![1.0; dd], false, top)?;
                params.insert("decoder.norm.b", 1, dd, vec![0.0; dd], false, top)?;
                params.insert("decoder.pred.w", dd, out, glorot(dd, out, rng), true, top)?;
                params.insert("decoder.pred.b", 1, out, vec![0.0; out], false, top)?;
            }
        }
        Ok(())
    }

    /// Replaces whatever head the model has with a fresh classifier.
    pub fn with_classify_head<R: Rng + ?Sized>(mut self, classes: usize, rng: &mut R) -> Result<Self> {
        self.params.remove_prefix("decoder.");
        self.params.remove_prefix("head.");
        self.params.remove_prefix("norm.");
        self.spec.head = HeadKind::Classify { classes };
        self.spec.validate()?;
        self.insert_head(rng)?;
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelSpec, ParamStore) {
        (self.spec, self.params)
    }

    pub fn token_count(&self) -> usize {
        self.spec.input_grid * self.spec.input_grid
    }

    /// Records the model's embedding (`N × d0`, row-major tokens) on a tape.
    pub fn record_embedding(&self, tape: &mut Tape) -> Result<Var> {
        let side = self.spec.input_grid;
        match self.spec.embed_mode {
            EmbedMode::Naive => self.params.var(tape, "pos.full"),
            EmbedMode::AbsWin => {
                let w = self.spec.window_size;
                let g = self.spec.global_size;
                let window = self.params.var(tape, "pos.window")?;
                let index = (0..side * side).map(|i| Some(((i / side) % w) * w + (i % side) % w)).collect();
                let tiled = tape.gather(window, index)?;
                let global = self.params.var(tape, "pos.global")?;
                let global = tape.resize(global, g, g, side, side)?;
                tape.add(tiled, global)
            }
        }
    }

    /// The materialised embedding at the current input grid.
    pub fn embedding_grid(&self) -> Result<Grid> {
        let mut tape = Tape::new();
        let v = self.record_embedding(&mut tape)?;
        mat_to_grid(tape.value(v), self.spec.input_grid, self.spec.input_grid)
    }

    pub fn naive_embed(&self) -> Option<NaiveEmbed> {
        let p = self.params.get("pos.full")?;
        let side = self.spec.input_grid;
        mat_to_grid(&p.mat(), side, side).ok().map(|grid| NaiveEmbed { grid })
    }

    pub fn abswin_embed(&self) -> Option<AbsWinEmbed> {
        let w = self.params.get("pos.window")?;
        let g = self.params.get("pos.global")?;
        let window = mat_to_grid(&w.mat(), self.spec.window_size, self.spec.window_size).ok()?;
        let global = mat_to_grid(&g.mat(), self.spec.global_size, self.spec.global_size).ok()?;
        AbsWinEmbed::new(window, global).ok()
    }

    /// Patch pixels as an `N × (p²·C)` matrix, rows in token order.
    pub fn patchify(&self, image: &Grid) -> Result<Mat> {
        let side = self.spec.image_side();
        if image.height() != side || image.width() != side || image.channels() != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "image is {}x{}x{}, model expects {side}x{side}x{}",
                image.height(),
                image.width(),
                image.channels(),
                self.spec.in_channels
            )));
        }
        let p = self.spec.patch_size;
        let c = self.spec.in_channels;
        let g = self.spec.input_grid;
        let mut data = Vec::with_capacity(image.data().len());
        for ty in 0..g {
            for tx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        data.extend(image.token(ty * p + dy, tx * p + dx).iter().map(|&v| v as f64));
                    }
                }
            }
        }
        Mat::new(g * g, p * p * c, data)
    }

    fn embedding_var(&self, tape: &mut Tape, source: EmbedSource<'_>) -> Result<Var> {
        match source {
            EmbedSource::Learned => self.record_embedding(tape),
            EmbedSource::Fixed(grid) => {
                let side = self.spec.input_grid;
                if grid.height() != side || grid.width() != side || grid.channels() != self.spec.stage_dims[0] {
                    return Err(Error::invalid(format!(
                        "embedding is {}x{}x{}, model needs {side}x{side}x{}",
                        grid.height(),
                        grid.width(),
                        grid.channels(),
                        self.spec.stage_dims[0]
                    )));
                }
                Ok(tape.leaf(grid_to_mat(grid)))
            }
        }
    }

    /// Token embedding (`patchify · W + b + pos`) for the selected rows.
    fn embed_tokens(&self, tape: &mut Tape, pixels: Var, rows: Option<&[usize]>, source: EmbedSource<'_>) -> Result<Var> {
        let pos = self.embedding_var(tape, source)?;
        let (pixels, pos) = match rows {
            Some(rows) => {
                let index: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
                (tape.gather(pixels, index.clone())?, tape.gather(pos, index)?)
            }
            None => (pixels, pos),
        };
        let w = self.params.var(tape, "patch.w")?;
        let b = self.params.var(tape, "patch.b")?;
        let x = tape.linear(pixels, w, Some(b))?;
        tape.add(x, pos)
    }

    fn block(&self, tape: &mut Tape, prefix: &str, tokens: &TokenSet, heads: usize, window: Option<usize>, relpos: bool) -> Result<Var> {
        let p = |s: &str| format!("{prefix}.{s}");
        let x = tokens.x;
        let g1 = self.params.var(tape, &p("norm1.g"))?;
        let b1 = self.params.var(tape, &p("norm1.b"))?;
        let h = tape.layer_norm(x, g1, b1)?;
        let qkv_w = self.params.var(tape, &p("attn.qkv.w"))?;
        let qkv_b = self.params.var(tape, &p("attn.qkv.b"))?;
        let attn = match window {
            Some(ws) => {
                let (forward, back) = window_index(&tokens.coords, ws);
                let padded = tape.gather(h, forward)?;
                let qkv = tape.linear(padded, qkv_w, Some(qkv_b))?;
                let n_win = tape.value(padded).rows / (ws * ws);
                let groups = (0..n_win).map(|k| (k * ws * ws, ws * ws)).collect();
                let rp = if relpos {
                    let coords = (0..n_win * ws * ws).map(|i| ((i % (ws * ws)) / ws, i % ws)).collect();
                    Some(self.relpos_spec(tape, prefix, ws, coords)?)
                } else {
                    None
                };
                let a = tape.attention(qkv, heads, groups, rp)?;
                tape.gather(a, back.into_iter().map(Some).collect())?
            }
            None => {
                let qkv = tape.linear(h, qkv_w, Some(qkv_b))?;
                let n = tokens.coords.len();
                let rp = if relpos {
                    Some(self.relpos_spec(tape, prefix, tokens.side, tokens.coords.clone())?)
                } else {
                    None
                };
                tape.attention(qkv, heads, vec![(0, n)], rp)?
            }
        };
        let pw = self.params.var(tape, &p("attn.proj.w"))?;
        let pb = self.params.var(tape, &p("attn.proj.b"))?;
        let attn = tape.linear(attn, pw, Some(pb))?;
        let x = tape.add(x, attn)?;
        let g2 = self.params.var(tape, &p("norm2.g"))?;
        let b2 = self.params.var(tape, &p("norm2.b"))?;
        let h = tape.layer_norm(x, g2, b2)?;
        let w1 = self.params.var(tape, &p("mlp.fc1.w"))?;
        let c1 = self.params.var(tape, &p("mlp.fc1.b"))?;
        let h = tape.linear(h, w1, Some(c1))?;
        let h = tape.gelu(h);
        let w2 = self.params.var(tape, &p("mlp.fc2.w"))?;
        let c2 = self.params.var(tape, &p("mlp.fc2.b"))?;
        let h = tape.linear(h, w2, Some(c2))?;
        tape.add(x, h)
    }

    fn relpos_spec(&self, tape: &mut Tape, prefix: &str, side: usize, coords: Vec<(usize, usize)>) -> Result<RelPosSpec> {
        let row_table = self.params.var(tape, &format!("{prefix}.attn.rel_h"))?;
        let col_table = self.params.var(tape, &format!("{prefix}.attn.rel_w"))?;
        if tape.value(row_table).rows != 2 * side - 1 {
            return Err(Error::invalid(format!("{prefix}: relpos tables not sized for side {side}")));
        }
        Ok(RelPosSpec { row_table, col_table, side, coords })
    }

    fn encoder(&self, tape: &mut Tape, mut tokens: TokenSet) -> Result<TokenSet> {
        let spec = &self.spec;
        let mut b = 0;
        for s in 0..spec.stages() {
            if s > 0 {
                let w = self.params.var(tape, &format!("stages.{s}.proj.w"))?;
                let bias = self.params.var(tape, &format!("stages.{s}.proj.b"))?;
                let x = tape.linear(tokens.x, w, Some(bias))?;
                let (groups, coords) = pool_groups(&tokens.coords);
                let x = tape.max_pool(x, &groups)?;
                tokens = TokenSet { x, coords, side: tokens.side.div_ceil(2) };
            }
            for _ in 0..spec.stage_depths[s] {
                let window = spec.block_window(b);
                let relpos = spec.relpos_global && window.is_none();
                let x = self.block(tape, &format!("blocks.{b}"), &tokens, spec.stage_heads[s], window, relpos)?;
                tokens.x = x;
                b += 1;
            }
        }
        Ok(tokens)
    }

    fn full_token_set(&self, x: Var) -> TokenSet {
        let side = self.spec.input_grid;
        TokenSet { x, coords: (0..side * side).map(|i| (i / side, i % side)).collect(), side }
    }

    /// Records the classification forward pass; returns the `1×K` logits.
    pub fn record_classify(&self, tape: &mut Tape, pixels: Var, source: EmbedSource<'_>) -> Result<Var> {
        if !matches!(self.spec.head, HeadKind::Classify { .. }) {
            return Err(Error::invalid("model has no classification head"));
        }
        let x = self.embed_tokens(tape, pixels, None, source)?;
        let tokens = self.encoder(tape, self.full_token_set(x))?;
        let pooled = tape.mean_rows(tokens.x);
        let g = self.params.var(tape, "norm.g")?;
        let b = self.params.var(tape, "norm.b")?;
        let pooled = tape.layer_norm(pooled, g, b)?;
        let w = self.params.var(tape, "head.w")?;
        let hb = self.params.var(tape, "head.b")?;
        tape.linear(pooled, w, Some(hb))
    }

    pub fn forward_classify(&self, image: &Grid) -> Result<Vec<f64>> {
        self.forward_classify_with(image, EmbedSource::Learned)
    }

    pub fn forward_classify_with(&self, image: &Grid, source: EmbedSource<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pixels = tape.leaf(self.patchify(image)?);
        let logits = self.record_classify(&mut tape, pixels, source)?;
        Ok(tape.value(logits).data.clone())
    }

    pub fn predict(&self, image: &Grid) -> Result<usize> {
        let logits = self.forward_classify(image)?;
        Ok(argmax(&logits))
    }

    /// Mask units per side at the current grid.
    pub fn mask_units_per_side(&self) -> usize {
        self.spec.input_grid / self.spec.window_size
    }

    pub fn mask_unit_count(&self) -> usize {
        let u = self.mask_units_per_side();
        u * u
    }

    /// Number of mask units kept for the configured mask ratio.
    pub fn kept_units(&self) -> usize {
        match self.spec.head {
            HeadKind::Mae { mask_ratio } => {
                let n = self.mask_unit_count();
                ((n as f64) * (1.0 - mask_ratio)) as usize
            }
            HeadKind::Classify { .. } => self.mask_unit_count(),
        }
    }

    /// Random mask over mask units (`true` = dropped).
    pub fn random_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        let n = self.mask_unit_count();
        let keep = self.kept_units();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut mask = vec![true; n];
        for &u in &order[..keep] {
            mask[u] = false;
        }
        mask
    }

    /// Records the masked-reconstruction loss. `encoder_pixels` feed the
    /// encoder, `target` supplies the reconstruction targets.
    pub fn record_mae(&self, tape: &mut Tape, encoder_pixels: Var, target: &Grid, mask: &[bool]) -> Result<Var> {
        let spec = &self.spec;
        if !matches!(spec.head, HeadKind::Mae { .. }) {
            return Err(Error::invalid("model has no reconstruction head"));
        }
        spec.validate_for_pretraining()?;
        let units = self.mask_units_per_side();
        if mask.len() != units * units {
            return Err(Error::invalid(format!("mask has {} entries for {} units", mask.len(), units * units)));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::invalid("every mask unit is masked"));
        }
        let side = spec.input_grid;
        let w = spec.window_size;
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        for (u, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            let (uy, ux) = (u / units, u % units);
            for dy in 0..w {
                for dx in 0..w {
                    let (y, x) = (uy * w + dy, ux * w + dx);
                    rows.push(y * side + x);
                    coords.push((y, x));
                }
            }
        }
        let x = self.embed_tokens(tape, encoder_pixels, Some(&rows), EmbedSource::Learned)?;
        let encoded = self.encoder(tape, TokenSet { x, coords, side })?;

        let fside = spec.stage_side(spec.stages() - 1);
        let shrink = 1usize << (spec.stages() - 1);
        let ew = self.params.var(tape, "decoder.embed.w")?;
        let eb = self.params.var(tape, "decoder.embed.b")?;
        let dec = tape.linear(encoded.x, ew, Some(eb))?;
        let mut slot = vec![None; fside * fside];
        for (r, &(y, x)) in encoded.coords.iter().enumerate() {
            slot[y * fside + x] = Some(r);
        }
        let dec = tape.gather(dec, slot.clone())?;
        let mask_token = self.params.var(tape, "decoder.mask_token")?;
        let fill = tape.gather(mask_token, slot.iter().map(|s| if s.is_none() { Some(0) } else { None }).collect())?;
        let dec = tape.add(dec, fill)?;
        let dpos = self.params.var(tape, "decoder.pos")?;
        let mut dec = tape.add(dec, dpos)?;
        let dtokens = |x| TokenSet { x, coords: (0..fside * fside).map(|i| (i / fside, i % fside)).collect(), side: fside };
        for i in 0..spec.decoder_depth {
            dec = self.block(tape, &format!("decoder.blocks.{i}"), &dtokens(dec), spec.decoder_heads, None, false)?;
        }
        let ng = self.params.var(tape, "decoder.norm.g")?;
        let nb = self.params.var(tape, "decoder.norm.b")?;
        let dec = tape.layer_norm(dec, ng, nb)?;
        let pw = self.params.var(tape, "decoder.pred.w")?;
        let pb = self.params.var(tape, "decoder.pred.b")?;
        let pred = tape.linear(dec, pw, Some(pb))?;

        let target = self.reconstruction_target(target)?;
        let masked_rows = (0..fside * fside)
            .filter(|&i| {
                let (y, x) = (i / fside, i % fside);
                mask[(y * shrink / w) * units + x * shrink / w]
            })
            .collect();
        tape.masked_mse(pred, target, masked_rows)
    }

    /// Pixels covered by each final-stage token, `(fside²) × (px²·C)`.
    fn reconstruction_target(&self, image: &Grid) -> Result<Mat> {
        let spec = &self.spec;
        let side = spec.image_side();
        if image.height() != side || image.width() != side || image.channels() != spec.in_channels {
            return Err(Error::invalid("target image has the wrong shape"));
        }
        let fside = spec.stage_side(spec.stages() - 1);
        let px = spec.pixels_per_final_token();
        let mut data = Vec::with_capacity(side * side * spec.in_channels);
        for cy in 0..fside {
            for cx in 0..fside {
                for dy in 0..px {
                    for dx in 0..px {
                        data.extend(image.token(cy * px + dy, cx * px + dx).iter().map(|&v| v as f64));
                    }
                }
            }
        }
        Mat::new(fside * fside, px * px * spec.in_channels, data)
    }

    pub fn forward_mae(&self, image: &Grid, mask: &[bool]) -> Result<f64> {
        self.forward_mae_split(image, image, mask)
    }

    /// Reconstruction loss with the encoder fed `input` and targets taken
    /// from `target`.
    pub fn forward_mae_split(&self, input: &Grid, target: &Grid, mask: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let pixels = tape.leaf(self.patchify(input)?);
        let loss = self.record_mae(&mut tape, pixels, target, mask)?;
        Ok(tape.scalar(loss))
    }

    /// Forward + backward for one labelled image; gradients are added to the
    /// parameter store scaled by `scale`. Returns `(loss, logits)`.
    pub fn accumulate_classify(&mut self, image: &Grid, label: usize, scale: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let pixels = tape.leaf(self.patchify(image)?);
        let logits = self.record_classify(&mut tape, pixels, EmbedSource::Learned)?;
        let loss = tape.cross_entropy(logits, label)?;
        backward(&mut self.params, &tape, loss, scale)?;
        Ok((tape.scalar(loss), tape.value(logits).data.clone()))
    }

    pub fn accumulate_mae(&mut self, image: &Grid, mask: &[bool], scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let pixels = tape.leaf(self.patchify(image)?);
        let loss = self.record_mae(&mut tape, pixels, image, mask)?;
        backward(&mut self.params, &tape, loss, scale)?;
        Ok(tape.scalar(loss))
    }

    /// Moves the model to a larger token grid. Only position-dependent
    /// parameters change: the naive embedding is bicubically resized, the
    /// absolute-win parts are kept (they are re-materialised at the new size),
    /// relpos tables are re-created zeroed at the new side.
    pub fn adapt_resolution(&self, new_grid: usize) -> Result<HieraLite> {
        let old = self.spec.input_grid;
        if new_grid < old {
            return Err(Error::invalid(format!("cannot shrink from grid {old} to {new_grid}")));
        }
        let mut spec = self.spec.clone();
        spec.input_grid = new_grid;
        spec.validate()?;
        let mut params = self.params.clone();
        if new_grid != old {
            if spec.embed_mode == EmbedMode::Naive {
                resize_param(&mut params, "pos.full", old, new_grid)?;
            }
            if matches!(spec.head, HeadKind::Mae { .. }) {
                let (fo, fnew) = (self.spec.stage_side(spec.stages() - 1), spec.stage_side(spec.stages() - 1));
                resize_param(&mut params, "decoder.pos", fo, fnew)?;
            }
            for b in 0..spec.total_blocks() {
                if let Some(side) = relpos_side(&spec, b) {
                    let hd = spec.stage_dims[spec.block_stage(b)] / spec.stage_heads[spec.block_stage(b)];
                    insert_relpos(&mut params, &format!("blocks.{b}"), side, hd, b + 1)?;
                }
            }
        }
        Ok(HieraLite { spec, params })
    }

    /// Redraws the absolute position embedding from its initial distribution,
    /// leaving every other parameter untouched.
    pub fn reset_position_embedding<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("pos.")) {
            for v in p.value.iter_mut() {
                *v = trunc_normal(INIT_STD, rng);
            }
        }
    }

    /// Window similarity of the materialised embedding at the current grid.
    pub fn window_similarity(&self) -> Result<f64> {
        crate::posembed::window_similarity(&self.embedding_grid()?, self.spec.window_size)
    }
}

/// Reverse pass from `loss` into the parameter store's gradient buffers.
pub fn backward(params: &mut ParamStore, tape: &Tape, loss: Var, scale: f64) -> Result<()> {
    let grads = tape.backward(loss)?;
    params.accumulate(tape, &grads, scale);
    Ok(())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn relpos_side(spec: &ModelSpec, b: usize) -> Option<usize> {
    (spec.relpos_global && spec.block_window(b).is_none()).then(|| spec.stage_side(spec.block_stage(b)))
}

fn insert_position_params<R: Rng + ?Sized>(spec: &ModelSpec, params: &mut ParamStore, rng: &mut R) -> Result<()> {
    let d0 = spec.stage_dims[0];
    match spec.embed_mode {
        EmbedMode::Naive => {
            let n = spec.input_grid * spec.input_grid;
            params.insert("pos.full", n, d0, trunc_normal_vec(n * d0, rng), false, 0)?;
        }
        EmbedMode::AbsWin => {
            let (w, g) = (spec.window_size, spec.global_size);
            params.insert("pos.window", w * w, d0, trunc_normal_vec(w * w * d0, rng), false, 0)?;
            params.insert("pos.global", g * g, d0, trunc_normal_vec(g * g * d0, rng), false, 0)?;
        }
    }
    Ok(())
}

fn insert_block_params<R: Rng + ?Sized>(
    params: &mut ParamStore,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    depth: usize,
    rng: &mut R,
) -> Result<()> {
    let hidden = dim * mlp_ratio;
    let mut put = |name: &str, rows: usize, cols: usize, value: Vec<f64>, decay: bool| {
        params.insert(&format!("{prefix}.{name}"), rows, cols, value, decay, depth).map(|_| ())
    };
    put("norm1.g", 1, dim, vec![1.0; dim], false)?;
    put("norm1.b", 1, dim, vec![0.0; dim], false)?;
    put("attn.qkv.w", dim, 3 * dim, glorot(dim, 3 * dim, rng), true)?;
    put("attn.qkv.b", 1, 3 * dim, vec![0.0; 3 * dim], false)?;
    put("attn.proj.w", dim, dim, glorot(dim, dim, rng), true)?;
    put("attn.proj.b", 1, dim, vec![0.0; dim], false)?;
    put("norm2.g", 1, dim, vec![1.0; dim], false)?;
    put("norm2.b", 1, dim, vec![0.0; dim], false)?;
    put("mlp.fc1.w", dim, hidden, glorot(dim, hidden, rng), true)?;
    put("mlp.fc1.b", 1, hidden, vec![0.0; hidden], false)?;
    put("mlp.fc2.w", hidden, dim, glorot(hidden, dim, rng), true)?;
    put("mlp.fc2.b", 1, dim, vec![0.0; dim], false)?;
    Ok(())
}

fn insert_relpos(params: &mut ParamStore, prefix: &str, side: usize, head_dim: usize, depth: usize) -> Result<()> {
    let len = (2 * side - 1) * head_dim;
    params.insert(&format!("{prefix}.attn.rel_h"), 2 * side - 1, head_dim, vec![0.0; len], false, depth)?;
    params.insert(&format!("{prefix}.attn.rel_w"), 2 * side - 1, head_dim, vec![0.0; len], false, depth)?;
    Ok(())
}

fn resize_param(params: &mut ParamStore, name: &str, old: usize, new: usize) -> Result<()> {
    let p = params.get_mut(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
    let rows = AxisWeights::new(old, new)?;
    let cols = AxisWeights::new(old, new)?;
    p.value = resample_separable(&p.value, p.cols, &rows, &cols);
    p.rows = new * new;
    p.grad = vec![0.0; p.value.len()];
    Ok(())
}

/// Groups token rows into padded windows by coordinate. Returns the gather
/// index into window layout (`None` = zero padding) and, for every original
/// row, its position in that layout.
fn window_index(coords: &[(usize, usize)], ws: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut windows: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut order = Vec::new();
    for &(y, x) in coords {
        let key = (y / ws, x / ws);
        if !windows.contains_key(&key) {
            windows.insert(key, order.len());
            order.push(key);
        }
    }
    let mut forward = vec![None; order.len() * ws * ws];
    let mut back = Vec::with_capacity(coords.len());
    for (r, &(y, x)) in coords.iter().enumerate() {
        let w = windows[&(y / ws, x / ws)];
        let pos = w * ws * ws + (y % ws) * ws + x % ws;
        forward[pos] = Some(r);
        back.push(pos);
    }
    (forward, back)
}

/// 2×2 pooling cells in order of first appearance, with their coordinates.
fn pool_groups(coords: &[(usize, usize)]) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::new();
    for (r, &(y, x)) in coords.iter().enumerate() {
        let key = (y / 2, x / 2);
        match cells.get(&key) {
            Some(&g) => groups[g].push(r),
            None => {
                cells.insert(key, groups.len());
                groups.push(vec![r]);
                out.push(key);
            }
        }
    }
    (groups, out)
}

pub fn grid_to_mat(grid: &Grid) -> Mat {
    Mat {
        rows: grid.height() * grid.width(),
        cols: grid.channels(),
        data: grid.data().iter().map(|&v| v as f64).collect(),
    }
}

pub fn mat_to_grid(mat: &Mat, height: usize, width: usize) -> Result<Grid> {
    if mat.rows != height * width {
        return Err(Error::invalid("matrix rows do not match grid size"));
    }
    Grid::new(height, width, mat.cols, mat.data.iter().map(|&v| v as f32).collect())
}
