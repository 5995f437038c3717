//! Line-based `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use abswin_core::data::{PosProbe, Textures, DEFAULT_MARKER_GAIN};
use abswin_core::model::{EmbedMode, HeadKind, ModelSpec};
use abswin_core::params::OptimizerKind;
use abswin_core::train::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::formats::{parse_list, parse_pairs, parse_windows, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    PosProbe,
    Mae,
    Texture,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PosProbe => "posprobe",
            Task::Mae => "mae",
            Task::Texture => "texture",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    pub pretrain_grid: usize,
    pub finetune_grid: usize,
    pub embed_mode: EmbedMode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// `adamw` or `sgd`.
    pub optimizer: String,
    pub weight_decay: f64,
    pub momentum: f64,
    /// `1.0` disables layer-wise decay.
    pub layer_decay: f64,
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub stage_windows: Vec<Option<usize>>,
    pub global_layers: Vec<usize>,
    pub relpos_global: bool,
    pub mlp_ratio: usize,
    pub window_size: usize,
    pub global_size: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub samples: usize,
    pub regions: usize,
    pub marker_gain: f32,
    pub texture_period: usize,
    pub texture_bank: usize,
    pub track_every: usize,
    pub bench_grids: Vec<usize>,
    pub bench_window: usize,
    pub bench_dim: usize,
    pub bench_heads: usize,
    pub bench_batch: usize,
    pub bench_iters: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            task: Task::Mae,
            pretrain_grid: 16,
            finetune_grid: 20,
            embed_mode: EmbedMode::AbsWin,
            steps: 600,
            batch: 8,
            lr: 1e-3,
            optimizer: "adamw".into(),
            weight_decay: 0.05,
            momentum: 0.9,
            layer_decay: 1.0,
            mask_ratio: 0.6,
            patch_size: 1,
            in_channels: 3,
            stage_depths: vec![1, 1, 1],
            stage_dims: vec![16, 16, 16],
            stage_heads: vec![2, 2, 2],
            stage_windows: vec![Some(4), Some(2), None],
            global_layers: Vec::new(),
            relpos_global: false,
            mlp_ratio: 2,
            window_size: 4,
            global_size: 4,
            decoder_dim: 16,
            decoder_depth: 2,
            decoder_heads: 2,
            samples: 2000,
            regions: 2,
            marker_gain: DEFAULT_MARKER_GAIN,
            texture_period: 4,
            texture_bank: 4,
            track_every: 50,
            bench_grids: vec![64],
            bench_window: 8,
            bench_dim: 32,
            bench_heads: 2,
            bench_batch: 8,
            bench_iters: 8,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

impl ExperimentConfig {
    /// Every key in canonical order, with its current value.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let windows: Vec<String> =
            self.stage_windows.iter().map(|w| w.map_or("global".into(), |w| w.to_string())).collect();
        vec![
            ("batch", self.batch.to_string()),
            ("bench_batch", self.bench_batch.to_string()),
            ("bench_dim", self.bench_dim.to_string()),
            ("bench_grids", join(&self.bench_grids)),
            ("bench_heads", self.bench_heads.to_string()),
            ("bench_iters", self.bench_iters.to_string()),
            ("bench_window", self.bench_window.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("embed_mode", self.embed_mode.as_str().into()),
            ("finetune_grid", self.finetune_grid.to_string()),
            ("global_layers", join(&self.global_layers)),
            ("global_size", self.global_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("layer_decay", format!("{:?}", self.layer_decay)),
            ("lr", format!("{:?}", self.lr)),
            ("marker_gain", format!("{:?}", self.marker_gain)),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("momentum", format!("{:?}", self.momentum)),
            ("optimizer", self.optimizer.clone()),
            ("output_dir", self.output_dir.display().to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("pretrain_grid", self.pretrain_grid.to_string()),
            ("regions", self.regions.to_string()),
            ("relpos_global", self.relpos_global.to_string()),
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
            ("stage_depths", join(&self.stage_depths)),
            ("stage_dims", join(&self.stage_dims)),
            ("stage_heads", join(&self.stage_heads)),
            ("stage_windows", windows.join(",")),
            ("steps", self.steps.to_string()),
            ("task", self.task.as_str().into()),
            ("texture_bank", self.texture_bank.to_string()),
            ("texture_period", self.texture_period.to_string()),
            ("track_every", self.track_every.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("window_size", self.window_size.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "task" => {
                self.task = match v {
                    "posprobe" => Task::PosProbe,
                    "mae" => Task::Mae,
                    "texture" => Task::Texture,
                    _ => return Err(format!("task: expected posprobe, mae or texture, got {v:?}")),
                }
            }
            "pretrain_grid" => self.pretrain_grid = num(key, v)?,
            "finetune_grid" => self.finetune_grid = num(key, v)?,
            "embed_mode" => {
                self.embed_mode =
                    EmbedMode::parse(v).ok_or_else(|| format!("embed_mode: expected naive or abswin, got {v:?}"))?
            }
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "optimizer" => match v {
                "adamw" | "sgd" => self.optimizer = v.into(),
                _ => return Err(format!("optimizer: expected adamw or sgd, got {v:?}")),
            },
            "weight_decay" => self.weight_decay = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "layer_decay" => self.layer_decay = num(key, v)?,
            "mask_ratio" => self.mask_ratio = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "in_channels" => self.in_channels = num(key, v)?,
            "stage_depths" => self.stage_depths = parse_list(v)?,
            "stage_dims" => self.stage_dims = parse_list(v)?,
            "stage_heads" => self.stage_heads = parse_list(v)?,
            "stage_windows" => self.stage_windows = parse_windows(v)?,
            "global_layers" => self.global_layers = parse_list(v)?,
            "relpos_global" => self.relpos_global = num(key, v)?,
            "mlp_ratio" => self.mlp_ratio = num(key, v)?,
            "window_size" => self.window_size = num(key, v)?,
            "global_size" => self.global_size = num(key, v)?,
            "decoder_dim" => self.decoder_dim = num(key, v)?,
            "decoder_depth" => self.decoder_depth = num(key, v)?,
            "decoder_heads" => self.decoder_heads = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "regions" => self.regions = num(key, v)?,
            "marker_gain" => self.marker_gain = num(key, v)?,
            "texture_period" => self.texture_period = num(key, v)?,
            "texture_bank" => self.texture_bank = num(key, v)?,
            "track_every" => self.track_every = num(key, v)?,
            "bench_grids" => self.bench_grids = parse_list(v)?,
            "bench_window" => self.bench_window = num(key, v)?,
            "bench_dim" => self.bench_dim = num(key, v)?,
            "bench_heads" => self.bench_heads = num(key, v)?,
            "bench_batch" => self.bench_batch = num(key, v)?,
            "bench_iters" => self.bench_iters = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `key=value` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let pairs = parse_pairs(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            for (k, v) in pairs {
                cfg.set(&k, &v).map_err(CliError::Usage)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::usage(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let u = |m: String| Err(CliError::Usage(m));
        if self.batch == 0 || self.track_every == 0 {
            return u("batch and track_every must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return u(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return u(format!("layer_decay must be in (0, 1], got {}", self.layer_decay));
        }
        if self.finetune_grid < self.pretrain_grid {
            return u(format!("finetune_grid {} is smaller than pretrain_grid {}", self.finetune_grid, self.pretrain_grid));
        }
        if self.samples < 5 {
            return u("samples must be >= 5 so both splits are non-empty".into());
        }
        if self.regions == 0 || self.regions > self.pretrain_grid {
            return u(format!("regions must be in 1..={}", self.pretrain_grid));
        }
        if self.texture_period == 0 || self.texture_bank == 0 {
            return u("texture_period and texture_bank must be >= 1".into());
        }
        let spec = self.model_spec();
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.task == Task::Mae {
            spec.validate_for_pretraining().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// Label count of the supervised task: texture motifs for `texture`,
    /// probe regions otherwise.
    pub fn classes(&self) -> usize {
        match self.task {
            Task::Texture => self.texture_bank,
            _ => self.regions * self.regions,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let head = match self.task {
            Task::PosProbe | Task::Texture => HeadKind::Classify { classes: self.classes() },
            Task::Mae => HeadKind::Mae { mask_ratio: self.mask_ratio },
        };
        ModelSpec {
            input_grid: self.pretrain_grid,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            stage_depths: self.stage_depths.clone(),
            stage_dims: self.stage_dims.clone(),
            stage_heads: self.stage_heads.clone(),
            stage_window_sizes: self.stage_windows.clone(),
            global_layer_indices: self.global_layers.clone(),
            relpos_global: self.relpos_global,
            mlp_ratio: self.mlp_ratio,
            embed_mode: self.embed_mode,
            window_size: self.window_size,
            global_size: self.global_size,
            head,
            decoder_dim: self.decoder_dim,
            decoder_depth: self.decoder_depth,
            decoder_heads: self.decoder_heads,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd { lr: self.lr, momentum: self.momentum },
            _ => OptimizerKind::adamw(self.lr, self.weight_decay),
        };
        let layer_decay = (self.layer_decay < 1.0).then_some(self.layer_decay);
        TrainConfig { steps: self.steps, batch: self.batch, optimizer, layer_decay, seed: self.seed }
    }

    /// Position-probe data at `side` pixels. The generator depends only on
    /// the seed, so pretraining and finetuning see the same marker layout.
    pub fn posprobe(&self, side: usize) -> CliResult<PosProbe> {
        let mut p = PosProbe::new(self.seed, self.samples, side, self.in_channels, self.regions)?;
        p.marker_gain = self.marker_gain;
        Ok(p)
    }

    pub fn textures(&self) -> CliResult<Textures> {
        self.textures_at(self.pretrain_grid * self.patch_size)
    }

    pub fn textures_at(&self, side: usize) -> CliResult<Textures> {
        Ok(Textures::new(self.seed, side, self.in_channels, self.texture_period, self.texture_bank)?)
    }

    /// Canonical text: sorted `key=value` lines, without `output_dir`.
    pub fn canonical(&self) -> String {
        self.pairs().into_iter().filter(|(k, _)| *k != "output_dir").map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())[..16].to_string()
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("config_hash".to_string(), self.hash());
        m.insert("seed".to_string(), self.seed.to_string());
        m
    }
}
