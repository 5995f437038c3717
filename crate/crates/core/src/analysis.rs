//! Diagnostics over position embeddings: window-similarity series during
//! training, channel images, and token similarity tables.
//!
//! Everything here produces bytes or strings; writing files is left to the
//! caller.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{EmbedMode, HieraLite};
use crate::posembed::{token_similarity_maps, window_similarity};

pub const SIMILARITY_COLUMNS: &str = "step,window_similarity,embed_mode,task,seed";
pub const DEFAULT_TRACK_EVERY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Mae,
    Supervised,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Mae => "mae",
            TaskKind::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mae" => Some(TaskKind::Mae),
            "supervised" => Some(TaskKind::Supervised),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub run_id: String,
    pub embed_mode: EmbedMode,
    pub task: TaskKind,
    pub seed: u64,
    /// Free-form `key=value` pairs written into the metadata row.
    pub metadata: Vec<(String, String)>,
    series: Vec<(usize, f64)>,
}

impl SimilarityReport {
    pub fn new(run_id: &str, embed_mode: EmbedMode, task: TaskKind, seed: u64) -> Self {
        SimilarityReport {
            run_id: run_id.to_string(),
            embed_mode,
            task,
            seed,
            metadata: Vec::new(),
            series: Vec::new(),
        }
    }

    pub fn series(&self) -> &[(usize, f64)] {
        &self.series
    }

    pub fn push(&mut self, step: usize, similarity: f64) -> Result<()> {
        if let Some(&(last, _)) = self.series.last() {
            if step <= last {
                return Err(Error::invalid(format!("step {step} does not follow {last}")));
            }
        }
        if !(-1.0..=1.0).contains(&similarity) {
            return Err(Error::invalid(format!("similarity {similarity} outside [-1, 1]")));
        }
        self.series.push((step, similarity));
        Ok(())
    }

    pub fn first(&self) -> Option<f64> {
        self.series.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.series.last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# run_id=");
        out.push_str(&self.run_id);
        for (k, v) in &self.metadata {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        out.push_str(SIMILARITY_COLUMNS);
        out.push('\n');
        for &(step, s) in &self.series {
            let _ = writeln!(out, "{step},{s:?},{},{},{}", self.embed_mode.as_str(), self.task.as_str(), self.seed);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::invalid("similarity csv: missing metadata row"))?;
        let mut run_id = None;
        let mut metadata = Vec::new();
        for pair in meta.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("similarity csv: bad metadata entry {pair}")))?;
            if k == "run_id" {
                run_id = Some(v.to_string());
            } else {
                metadata.push((k.to_string(), v.to_string()));
            }
        }
        let run_id = run_id.ok_or_else(|| Error::invalid("similarity csv: no run_id"))?;
        if lines.next() != Some(SIMILARITY_COLUMNS) {
            return Err(Error::invalid("similarity csv: unexpected header"));
        }
        let mut header: Option<(EmbedMode, TaskKind, u64)> = None;
        let mut series = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("similarity csv: bad row {line}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let step: usize = f[0].parse().map_err(|_| bad())?;
            let sim: f64 = f[1].parse().map_err(|_| bad())?;
            let row = (
                EmbedMode::parse(f[2]).ok_or_else(bad)?,
                TaskKind::parse(f[3]).ok_or_else(bad)?,
                f[4].parse::<u64>().map_err(|_| bad())?,
            );
            if header.is_some_and(|h| h != row) {
                return Err(Error::invalid("similarity csv: rows disagree on mode, task or seed"));
            }
            header = Some(row);
            series.push((step, sim));
        }
        let (embed_mode, task, seed) = header.unwrap_or((EmbedMode::Naive, TaskKind::Mae, 0));
        let mut report = SimilarityReport { run_id, embed_mode, task, seed, metadata, series: Vec::new() };
        for (step, s) in series {
            report.push(step, s)?;
        }
        Ok(report)
    }
}

/// Training hook that samples window similarity every `every` steps and at
/// the final step.
#[derive(Clone, Debug)]
pub struct SimilarityTracker {
    every: usize,
    final_step: usize,
    pub report: SimilarityReport,
}

impl SimilarityTracker {
    pub fn new(report: SimilarityReport, every: usize, final_step: usize) -> Result<Self> {
        if every == 0 {
            return Err(Error::invalid("tracking interval must be >= 1"));
        }
        Ok(SimilarityTracker { every, final_step, report })
    }

    pub fn observe(&mut self, step: usize, model: &HieraLite) -> Result<()> {
        if step % self.every == 0 || step == self.final_step {
            self.report.push(step, model.window_similarity()?)?;
        }
        Ok(())
    }

    /// Records the similarity of an arbitrary embedding grid.
    pub fn observe_grid(&mut self, step: usize, embed: &Grid, window_size: usize) -> Result<()> {
        if step % self.every == 0 || step == self.final_step {
            self.report.push(step, window_similarity(embed, window_size)?)?;
        }
        Ok(())
    }
}

/// Min-max normalised channel as a binary PGM (P5). A constant channel
/// maps to mid-gray 127.
pub fn encode_channel_pgm(embed: &Grid, channel: usize, comment: &str) -> Result<Vec<u8>> {
    let plane = embed.channel_plane(channel)?;
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = Vec::with_capacity(plane.len() + 64);
    let mut head = String::from("P5\n");
    for line in comment.lines() {
        let _ = writeln!(head, "# {line}");
    }
    let _ = write!(head, "{} {}\n255\n", embed.width(), embed.height());
    out.extend_from_slice(head.as_bytes());
    let span = hi as f64 - lo as f64;
    out.extend(plane.iter().map(|&v| {
        if span <= 0.0 {
            127
        } else {
            libm::round((v as f64 - lo as f64) / span * 255.0) as u8
        }
    }));
    Ok(out)
}

/// A parsed P5 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub comments: Vec<String>,
    pub pixels: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |m: &str| Error::invalid(format!("pgm: {m}"));
    let mut pos = 0;
    let mut comments = Vec::new();
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let text = core::str::from_utf8(&bytes[pos + 1..end]).map_err(|_| bad("non-utf8 comment"))?;
            comments.push(text.trim_start().to_string());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok(Pgm { width: w, height: h, comments, pixels: pixels.to_vec() })
}

/// The `s²×s²` token similarity matrix as CSV, row `i` holding the cosines
/// of token `i` (row-major) against every token.
pub fn token_maps_csv(part: &Grid, metadata: &str) -> Result<String> {
    let m = token_similarity_maps(part)?;
    let mut out = String::new();
    let _ = writeln!(out, "# {metadata}");
    out.push_str("token");
    for j in 0..m.size {
        let _ = write!(out, ",t{j}");
    }
    out.push('\n');
    for i in 0..m.size {
        let _ = write!(out, "{i}");
        for v in m.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_token_maps_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::invalid("token map csv: malformed");
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let cols = lines.next().ok_or_else(bad)?.split(',').count() - 1;
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let mut f = line.split(',');
        if f.next().and_then(|t| t.parse::<usize>().ok()) != Some(i) {
            return Err(bad());
        }
        let row: Vec<f64> = f.map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(bad());
        }
        rows.push(row);
    }
    if rows.len() != cols {
        return Err(bad());
    }
    Ok(rows)
}
