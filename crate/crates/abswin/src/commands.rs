//! The experiment commands. Each `run_*` function computes in memory; each
//! `cmd_*` function also writes its artifacts and a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use abswin_core::analysis::{encode_channel_pgm, token_maps_csv, SimilarityReport, SimilarityTracker, TaskKind};
use abswin_core::data::split;
use abswin_core::grid::{bicubic_resize, cosine_similarity, crop};
use abswin_core::model::{EmbedMode, HeadKind, HieraLite};
use abswin_core::posembed::{detection_tile, materialize_abswin, recursive_abswin, window_similarity, NaiveEmbed};
use abswin_core::train::{evaluate, train_classify, train_mae, TrainLog};
use abswin_core::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{config_matrix, latency_csv, run_matrix, Latency};
use crate::config::{ExperimentConfig, Task};
use crate::error::{CliError, CliResult};
use crate::formats::{encode_embed, read_embed, write_manifest, Checkpoint, EmbedFile};

/// Ordered `(name, value)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, String)>);

impl Metrics {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn line(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn to_csv(&self, metadata: &str) -> String {
        let mut out = format!("# {metadata}\nmetric,value\n");
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn from_csv(text: &str) -> CliResult<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("metric,value") {
            return Err(CliError::Format("metrics csv: unexpected header".into()));
        }
        let mut m = Metrics::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once(',').ok_or_else(|| CliError::Format(format!("metrics csv: bad row {line:?}")))?;
            m.push(k, v);
        }
        Ok(m)
    }
}

/// Collects written files for the manifest.
pub struct ArtifactWriter {
    pub dir: PathBuf,
    pub metadata: String,
    pub written: Vec<(PathBuf, Vec<u8>)>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, metadata: String) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), metadata, written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: Vec<u8>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push((path.clone(), bytes));
        Ok(path)
    }

    pub fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> CliResult<()> {
        self.written.extend(ck.save(&self.dir.join(name))?);
        Ok(())
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        write_manifest(&self.dir, &self.written, &self.metadata)
    }
}

fn metadata_line(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

fn mean_window(v: &[f64], head: bool) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len().min(20);
    let part = if head { &v[..n] } else { &v[v.len() - n..] };
    part.iter().sum::<f64>() / n as f64
}

/// Evaluation subset of the training split, so accuracy on it is cheap.
const TRAIN_EVAL_CAP: usize = 400;

pub fn run_id(cfg: &ExperimentConfig, stage: &str) -> String {
    format!("{stage}_{}_{}_s{}", cfg.task.as_str(), cfg.embed_mode.as_str(), cfg.seed)
}

fn tracker(cfg: &ExperimentConfig, id: &str, task: TaskKind) -> CliResult<SimilarityTracker> {
    let mut report = SimilarityReport::new(id, cfg.embed_mode, task, cfg.seed);
    report.metadata = cfg.metadata().into_iter().collect();
    report.metadata.push(("grid".into(), "stage1_tokens".into()));
    Ok(SimilarityTracker::new(report, cfg.track_every, cfg.steps)?)
}

fn classify_run(
    cfg: &ExperimentConfig,
    model: &mut HieraLite,
    side: usize,
    id: &str,
    metrics: &mut Metrics,
) -> CliResult<SimilarityReport> {
    let probe;
    let tex;
    let sample: Box<dyn Fn(usize) -> (Grid, usize) + '_> = if cfg.task == Task::Texture {
        tex = cfg.textures_at(side * cfg.patch_size)?;
        Box::new(|i| tex.sample_labeled(i))
    } else {
        probe = cfg.posprobe(side * cfg.patch_size)?;
        Box::new(|i| probe.sample(i))
    };
    let (train, eval) = split(cfg.samples);
    let mut track = tracker(cfg, id, TaskKind::Supervised)?;
    let log: TrainLog = train_classify(model, &sample, &train, &cfg.train_config(), &mut |s, m| track.observe(s, m))?;
    let train_acc = evaluate(model, &sample, &train[..train.len().min(TRAIN_EVAL_CAP)])?;
    let eval_acc = evaluate(model, &sample, &eval)?;
    metrics.push("grid", side);
    metrics.push("initial_loss", format!("{:.6}", mean_window(&log.losses, true)));
    metrics.push("final_loss", format!("{:.6}", mean_window(&log.losses, false)));
    metrics.push("train_accuracy", format!("{train_acc:.4}"));
    metrics.push("eval_accuracy", format!("{eval_acc:.4}"));
    Ok(track.report)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: HieraLite,
    pub report: SimilarityReport,
    pub metrics: Metrics,
}

pub fn run_pretrain(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = HieraLite::new(cfg.model_spec(), &mut rng)?;
    let id = run_id(cfg, "pretrain");
    let mut metrics = Metrics::default();
    let report = match cfg.task {
        Task::PosProbe | Task::Texture => classify_run(cfg, &mut model, cfg.pretrain_grid, &id, &mut metrics)?,
        Task::Mae => {
            let tex = cfg.textures()?;
            let pool: Vec<usize> = (0..cfg.samples).collect();
            let mut track = tracker(cfg, &id, TaskKind::Mae)?;
            let log = train_mae(&mut model, &|i| tex.sample(i), &pool, &cfg.train_config(), &mut |s, m| {
                track.observe(s, m)
            })?;
            metrics.push("grid", cfg.pretrain_grid);
            metrics.push("initial_loss", format!("{:.6}", mean_window(&log.losses, true)));
            metrics.push("final_loss", format!("{:.6}", mean_window(&log.losses, false)));
            track.report
        }
    };
    push_similarity(&mut metrics, &report);
    Ok(RunOutput { model, report, metrics })
}

fn push_similarity(metrics: &mut Metrics, report: &SimilarityReport) {
    if let (Some(a), Some(b)) = (report.first(), report.last()) {
        metrics.push("initial_similarity", format!("{a:.6}"));
        metrics.push("final_similarity", format!("{b:.6}"));
    }
}

/// Swaps in a classifier if needed, adapts to `finetune_grid`, and trains
/// there on texture classification for `task=texture`, otherwise on the
/// position probe.
pub fn run_finetune(cfg: &ExperimentConfig, pretrained: &HieraLite) -> CliResult<RunOutput> {
    cfg.validate()?;
    let spec = pretrained.spec();
    if spec.embed_mode != cfg.embed_mode {
        return Err(CliError::usage(format!(
            "checkpoint uses {} embeddings but the config asks for {}",
            spec.embed_mode.as_str(),
            cfg.embed_mode.as_str()
        )));
    }
    if spec.input_grid > cfg.finetune_grid {
        return Err(CliError::usage(format!(
            "checkpoint grid {} is larger than finetune_grid {}",
            spec.input_grid, cfg.finetune_grid
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let classes = cfg.classes();
    let model = match spec.head {
        HeadKind::Classify { classes: k } if k == classes => pretrained.clone(),
        _ => pretrained.clone().with_classify_head(classes, &mut rng)?,
    };
    let mut model = model.adapt_resolution(cfg.finetune_grid)?;
    let mut metrics = Metrics::default();
    metrics.push("pretrain_grid", spec.input_grid);
    let report = classify_run(cfg, &mut model, cfg.finetune_grid, &run_id(cfg, "finetune"), &mut metrics)?;
    push_similarity(&mut metrics, &report);
    Ok(RunOutput { model, report, metrics })
}

fn write_run(cfg: &ExperimentConfig, out: &RunOutput, stage: &str) -> CliResult<PathBuf> {
    let mut meta = cfg.metadata();
    meta.insert("run_id".into(), out.report.run_id.clone());
    meta.insert("stage".into(), stage.into());
    let mut w = ArtifactWriter::new(&cfg.output_dir, metadata_line(&cfg.metadata()))?;
    w.checkpoint("checkpoint", &Checkpoint { model: out.model.clone(), metadata: meta })?;
    w.write(&format!("{}_similarity.csv", out.report.run_id), out.report.to_csv().into_bytes())?;
    w.write("metrics.csv", out.metrics.to_csv(&metadata_line(&cfg.metadata())).into_bytes())?;
    w.write("config.txt", cfg.canonical().into_bytes())?;
    w.finish()
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let out = run_pretrain(cfg)?;
    write_run(cfg, &out, "pretrain")?;
    Ok(out)
}

pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<RunOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let out = run_finetune(cfg, &ck.model)?;
    write_run(cfg, &out, "finetune")?;
    Ok(out)
}

/// Writes channel images of the materialised embedding (and of the window
/// part for absolute-win models), token similarity tables, and a summary.
pub fn cmd_analyze(checkpoint: &Path, output_dir: &Path) -> CliResult<Metrics> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = &ck.model;
    let spec = model.spec();
    let run = ck.metadata.get("run_id").cloned().unwrap_or_else(|| format!("model_{}", spec.embed_mode.as_str()));
    let mut meta = BTreeMap::new();
    for k in ["config_hash", "seed"] {
        meta.insert(k.to_string(), ck.metadata.get(k).cloned().unwrap_or_else(|| "unknown".into()));
    }
    let meta = metadata_line(&meta);
    let mut w = ArtifactWriter::new(output_dir, meta.clone())?;
    let embed = model.embedding_grid()?;
    for c in 0..embed.channels() {
        w.write(&format!("{run}_ch{c}.pgm"), encode_channel_pgm(&embed, c, &meta)?)?;
    }
    let ws = spec.window_size;
    let part = match model.abswin_embed() {
        Some(a) => {
            for c in 0..a.channels() {
                w.write(&format!("{run}_window_ch{c}.pgm"), encode_channel_pgm(a.window(), c, &meta)?)?;
            }
            a.window().clone()
        }
        None => crop(&embed, 0, 0, ws.min(embed.height()), ws.min(embed.width()))?,
    };
    w.write(&format!("{run}_token_maps.csv"), token_maps_csv(&part, &meta)?.into_bytes())?;
    let mut m = Metrics::default();
    m.push("run_id", &run);
    m.push("embed_mode", spec.embed_mode.as_str());
    m.push("grid", spec.input_grid);
    m.push("window_size", ws);
    m.push("window_similarity", format!("{:.6}", window_similarity(&embed, ws)?));
    w.write(&format!("{run}_summary.csv"), m.to_csv(&meta).into_bytes())?;
    w.finish()?;
    Ok(m)
}

pub fn cmd_bench(cfg: &ExperimentConfig, parallel: bool) -> CliResult<Vec<Latency>> {
    let cases = config_matrix(cfg.bench_dim, cfg.bench_heads, cfg.bench_window, &cfg.bench_grids);
    let rows = run_matrix(&cases, cfg.bench_batch, cfg.bench_iters, parallel)?;
    let meta = metadata_line(&cfg.metadata());
    let mut w = ArtifactWriter::new(&cfg.output_dir, meta.clone())?;
    w.write("latency.csv", latency_csv(&rows, &meta).into_bytes())?;
    w.finish()?;
    Ok(rows)
}

/// Per-block cosine between each complete reference-sized block of the
/// naive and tiled detection grids and the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub block: usize,
    pub rows: Vec<(usize, usize, f64, f64)>,
}

impl Alignment {
    pub fn to_csv(&self, metadata: &str) -> String {
        let mut out = format!("# {metadata} block={}\nblock_y,block_x,naive_cosine,tiled_cosine\n", self.block);
        for &(y, x, a, b) in &self.rows {
            let _ = writeln!(out, "{y},{x},{a:.9},{b:.9}");
        }
        out
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let (a, b) = self.rows.iter().fold((0.0, 0.0), |(a, b), r| (a + r.2, b + r.3));
        (a / n, b / n)
    }
}

fn block(grid: &Grid, y: usize, x: usize, p: usize) -> CliResult<Vec<f32>> {
    Ok(crop(grid, y * p, x * p, p, p)?.into_data())
}

/// Builds naive and tiled detection-resolution grids from a pretrained
/// embedding. Absolute-win inputs are materialised at `base_res` first and
/// tiled through the recursive construction.
pub fn run_detection_embed(embed: &EmbedFile, out_grid: usize, base_res: Option<usize>) -> CliResult<(Grid, Grid, Alignment)> {
    let (reference, tiled) = match embed {
        EmbedFile::Naive(NaiveEmbed { grid }) => {
            if grid.height() != grid.width() {
                return Err(CliError::usage("pretrained embedding must be square"));
            }
            (grid.clone(), detection_tile(grid, out_grid, out_grid)?)
        }
        EmbedFile::AbsWin(a) => {
            let base = base_res.unwrap_or(a.window_size() * a.global_size());
            (materialize_abswin(a, base, base)?, recursive_abswin(a, base, out_grid, out_grid)?)
        }
    };
    let p = reference.height();
    if out_grid < p {
        return Err(CliError::usage(format!("detection grid {out_grid} is smaller than the pretrained grid {p}")));
    }
    let naive = bicubic_resize(&reference, out_grid, out_grid)?;
    let r = reference.data();
    let mut rows = Vec::new();
    for y in 0..out_grid / p {
        for x in 0..out_grid / p {
            let a = cosine_similarity(&block(&naive, y, x, p)?, r)?;
            let b = cosine_similarity(&block(&tiled, y, x, p)?, r)?;
            rows.push((y, x, a, b));
        }
    }
    Ok((naive, tiled, Alignment { block: p, rows }))
}

pub fn cmd_demo_detection_embed(
    cfg: &ExperimentConfig,
    embed_path: &Path,
    out_grid: usize,
    base_res: Option<usize>,
) -> CliResult<Alignment> {
    let embed = read_embed(embed_path)?;
    let (naive, tiled, align) = run_detection_embed(&embed, out_grid, base_res)?;
    let meta = metadata_line(&cfg.metadata());
    let mut w = ArtifactWriter::new(&cfg.output_dir, meta.clone())?;
    w.write("detection_naive.pemb", encode_embed(&EmbedFile::Naive(NaiveEmbed { grid: naive }))?)?;
    w.write("detection_tiled.pemb", encode_embed(&EmbedFile::Naive(NaiveEmbed { grid: tiled }))?)?;
    w.write("detection_alignment.csv", align.to_csv(&meta).into_bytes())?;
    w.finish()?;
    Ok(align)
}

/// Identifies the embedding scheme a checkpoint was trained with.
pub fn checkpoint_mode(dir: &Path) -> CliResult<EmbedMode> {
    Ok(Checkpoint::load(dir)?.model.spec().embed_mode)
}
