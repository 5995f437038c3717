//! Wall-clock latency of single attention layers.

use std::fmt::Write as _;
use std::time::Instant;

use abswin_core::attention::{mhsa_forward, AttentionLayerConfig, AttentionParams};
use abswin_core::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CliError, CliResult};

pub const BENCH_COLUMNS: &str = "config_id,grid_side,window_size,relpos,mean_ms,median_ms,p95_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub id: String,
    pub layer: AttentionLayerConfig,
    pub grid_side: usize,
}

impl BenchCase {
    pub fn new(layer: AttentionLayerConfig, grid_side: usize) -> Self {
        let win = layer.window_size.map_or("global".to_string(), |w| format!("w{w}"));
        let rel = if layer.use_relpos { "relpos" } else { "plain" };
        BenchCase { id: format!("{win}_{rel}_{grid_side}"), layer, grid_side }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latency {
    pub case: BenchCase,
    /// Per-iteration wall time of the kept (post warm-up) iterations.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

impl Latency {
    fn from_samples(case: BenchCase, samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Latency {
            case,
            mean_ms: samples_ms.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: percentile(&sorted, 0.95),
            samples_ms,
        }
    }
}

/// Times `iters` iterations of one forward per batch element and drops the
/// first quarter as warm-up.
pub fn time_case(case: &BenchCase, batch: usize, iters: usize, seed: u64) -> CliResult<Latency> {
    if batch == 0 || iters < 2 {
        return Err(CliError::usage("benchmark needs batch >= 1 and iters >= 2"));
    }
    case.layer.validate()?;
    let side = case.layer.attended_side(case.grid_side, case.grid_side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::random(&case.layer, side, &mut rng);
    let inputs: Vec<Grid> = (0..batch)
        .map(|_| {
            Grid::from_fn(case.grid_side, case.grid_side, case.layer.dim, |_, _, _| StandardNormal.sample(&mut rng))
        })
        .collect();
    let mut samples = Vec::with_capacity(iters);
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let t = Instant::now();
        for x in &inputs {
            sink += mhsa_forward(x, &params, &case.layer)?.data()[0];
        }
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    let warmup = iters / 4;
    Ok(Latency::from_samples(case.clone(), samples.split_off(warmup)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: Latency,
    pub b: Latency,
}

impl Comparison {
    /// Median latency of `b` over `a`.
    pub fn ratio(&self) -> f64 {
        self.b.median_ms / self.a.median_ms
    }
}

/// Times two layer configs of the same width on the same grid.
pub fn bench_attention(
    a: &AttentionLayerConfig,
    b: &AttentionLayerConfig,
    grid_side: usize,
    batch: usize,
    iters: usize,
) -> CliResult<Comparison> {
    if a.dim != b.dim || a.heads != b.heads {
        return Err(CliError::usage("compared configs must share dim and heads"));
    }
    Ok(Comparison {
        a: time_case(&BenchCase::new(*a, grid_side), batch, iters, 0)?,
        b: time_case(&BenchCase::new(*b, grid_side), batch, iters, 0)?,
    })
}

/// Window/global × relpos off/on for every grid side.
pub fn config_matrix(dim: usize, heads: usize, window: usize, grids: &[usize]) -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for &side in grids {
        for window_size in [Some(window), None] {
            for use_relpos in [false, true] {
                cases.push(BenchCase::new(AttentionLayerConfig { dim, heads, window_size, use_relpos }, side));
            }
        }
    }
    cases
}

/// Runs every case, optionally on one thread per case.
pub fn run_matrix(cases: &[BenchCase], batch: usize, iters: usize, parallel: bool) -> CliResult<Vec<Latency>> {
    if !parallel {
        return cases.iter().map(|c| time_case(c, batch, iters, 0)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = cases.iter().map(|c| s.spawn(move || time_case(c, batch, iters, 0))).collect();
        handles.into_iter().map(|h| h.join().expect("benchmark thread panicked")).collect()
    })
}

pub fn latency_csv(rows: &[Latency], metadata: &str) -> String {
    let mut out = format!("# {metadata}\n{BENCH_COLUMNS}\n");
    for r in rows {
        let c = &r.case;
        let win = c.layer.window_size.map_or("global".to_string(), |w| w.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4}",
            c.id, c.grid_side, win, c.layer.use_relpos, r.mean_ms, r.median_ms, r.p95_ms
        );
    }
    out
}
