//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use abswin::bench::{bench_attention, latency_csv, BENCH_COLUMNS};
use abswin::commands::{
    cmd_analyze, cmd_bench, cmd_demo_detection_embed, cmd_finetune, cmd_pretrain, run_finetune, run_pretrain, Metrics,
};
use abswin::formats::{decode_embed, encode_embed, verify_manifest, Checkpoint, EmbedFile};
use abswin::{ExperimentConfig, Task};
use abswin_core::analysis::{decode_pgm, parse_token_maps_csv, SimilarityReport};
use abswin_core::attention::AttentionLayerConfig;
use abswin_core::autodiff::Tape;
use abswin_core::grid::{bicubic_resize, crop, Grid};
use abswin_core::model::{EmbedMode, EmbedSource, HeadKind, HieraLite, ModelSpec};
use abswin_core::posembed::{
    materialize_abswin, recursive_abswin, resize_abswin, resize_naive, trunc_normal_grid, window_similarity, AbsWinEmbed,
    NaiveEmbed,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
    Grid::from_fn(h, w, c, |_, _, _| rng.gen_range(-2.0..2.0))
}

// ---------------------------------------------------------------- 1

fn cubic(x: f64) -> f64 {
    let a = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

fn oracle_resize(src: &Grid, out_h: usize, out_w: usize) -> Grid {
    let (h, w) = (src.height() as i64, src.width() as i64);
    Grid::from_fn(out_h, out_w, src.channels(), |oy, ox, c| {
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
        let (fy, fx) = (sy.floor(), sx.floor());
        let mut acc = 0.0;
        for m in -1i64..=2 {
            for n in -1i64..=2 {
                let wgt = cubic(sy - (fy + m as f64)) * cubic(sx - (fx + n as f64));
                let y = (fy as i64 + m).clamp(0, h - 1) as usize;
                let x = (fx as i64 + n).clamp(0, w - 1) as usize;
                acc += wgt * src.at(y, x, c) as f64;
            }
        }
        acc as f32
    })
}

fn bicubic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    let cases = 120;
    for _ in 0..cases {
        let (ih, iw, c) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..5));
        let (oh, ow) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let src = random_grid(&mut rng, ih, iw, c);
        let d = bicubic_resize(&src, oh, ow).map_err(|e| e.to_string())?.max_abs_diff(&oracle_resize(&src, oh, ow));
        worst = worst.max(d);
        let same = bicubic_resize(&src, ih, iw).map_err(|e| e.to_string())?;
        ensure(same == src, || format!("identity resize of {ih}x{iw}x{c} is not bitwise exact"))?;
    }
    ensure(worst <= 1e-5, || format!("max abs diff {worst:e} over {cases} cases"))?;
    Ok(format!("{cases} cases, max abs diff {worst:.2e}, identity bitwise"))
}

// ---------------------------------------------------------------- 2

fn window_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut divisible, mut ragged) = (0.0f32, 0, 0);
    for i in 0..50 {
        let (ws, gs, c) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..5));
        let e = AbsWinEmbed::random(ws, gs, c, &mut rng).map_err(|e| e.to_string())?;
        let e = AbsWinEmbed::new(e.window().clone(), random_grid(&mut rng, gs, gs, c)).map_err(|e| e.to_string())?;
        let (h, w) = if i % 2 == 0 {
            divisible += 1;
            (ws * rng.gen_range(1..6), ws * rng.gen_range(1..6))
        } else {
            ragged += 1;
            (ws * rng.gen_range(1..5) + rng.gen_range(1..ws.max(2)), ws * rng.gen_range(1..5) + rng.gen_range(0..ws))
        };
        let full = materialize_abswin(&e, h, w).map_err(|e| e.to_string())?;
        let global = bicubic_resize(e.global(), h, w).map_err(|e| e.to_string())?;
        let residual = full.sub(&global).map_err(|e| e.to_string())?;
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                let block = crop(&residual, wy * ws, wx * ws, ws, ws).map_err(|e| e.to_string())?;
                worst = worst.max(block.max_abs_diff(e.window()));
            }
        }
        ensure(resize_abswin(&e, h, w).map_err(|e| e.to_string())? == full, || "resize_abswin differs from materialise".into())?;
    }
    ensure(worst <= 1e-6, || format!("window part recovered with error {worst:e}"))?;
    Ok(format!("50 embeddings ({divisible} divisible, {ragged} ragged targets), max window error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn bug_witness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let window = trunc_normal_grid(4, 4, 8, 0.02, &mut rng);
    let e = AbsWinEmbed::new(window.clone(), Grid::zeros(4, 4, 8)).map_err(|e| e.to_string())?;
    let at16 = materialize_abswin(&e, 16, 16).map_err(|e| e.to_string())?;
    let s16 = window_similarity(&at16, 4).map_err(|e| e.to_string())?;
    ensure(s16 == 1.0, || format!("zero-global similarity {s16} is not exactly 1"))?;
    let naive = resize_naive(&NaiveEmbed { grid: at16 }, 20, 20).map_err(|e| e.to_string())?;
    let s_naive = window_similarity(&naive, 4).map_err(|e| e.to_string())?;
    ensure(s_naive < 0.999, || format!("naive resize similarity {s_naive} not below 0.999"))?;
    let fixed = resize_abswin(&e, 20, 20).map_err(|e| e.to_string())?;
    for wy in 0..5 {
        for wx in 0..5 {
            ensure(crop(&fixed, wy * 4, wx * 4, 4, 4).map_err(|e| e.to_string())? == window, || {
                format!("abswin window ({wy},{wx}) is not the window part")
            })?;
        }
    }
    let s_fixed = window_similarity(&fixed, 4).map_err(|e| e.to_string())?;
    Ok(format!("16x16 similarity 1.0; 20x20 naive {s_naive:.6}, abswin {s_fixed:.6} (exactly tiled)"))
}

// ---------------------------------------------------------------- 4

fn recursive_construction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut configs = vec![(7usize, 2usize, 14usize, 64usize, 64usize)];
    while configs.len() < 20 {
        let ws = rng.gen_range(1..6);
        let base = ws * rng.gen_range(1..5);
        configs.push((ws, rng.gen_range(1..6), base, base + rng.gen_range(0..3 * base), base + rng.gen_range(0..3 * base)));
    }
    for &(ws, gs, base, oh, ow) in &configs {
        let e = AbsWinEmbed::new(random_grid(&mut rng, ws, ws, 4), random_grid(&mut rng, gs, gs, 4))
            .map_err(|e| e.to_string())?;
        let inner = materialize_abswin(&e, base, base).map_err(|e| e.to_string())?;
        let out = recursive_abswin(&e, base, oh, ow).map_err(|e| e.to_string())?;
        ensure(out.height() == oh && out.width() == ow, || "wrong output shape".into())?;
        for by in 0..oh / base {
            for bx in 0..ow / base {
                let block = crop(&out, by * base, bx * base, base, base).map_err(|e| e.to_string())?;
                ensure(block == inner, || format!("block ({by},{bx}) of {base}->{oh}x{ow} differs from the inner embedding"))?;
            }
        }
    }
    Ok("20 configs incl. 14->64, every complete block bitwise equal to the inner embedding".into())
}

// ---------------------------------------------------------------- 5

enum Objective {
    Classify(usize),
    Mae(Vec<bool>),
}

fn objective(m: &HieraLite, img: &Grid, task: &Objective) -> f64 {
    let mut tape = Tape::new();
    let pixels = tape.leaf(m.patchify(img).unwrap());
    let l = match task {
        Objective::Classify(label) => {
            let logits = m.record_classify(&mut tape, pixels, EmbedSource::Learned).unwrap();
            tape.cross_entropy(logits, *label).unwrap()
        }
        Objective::Mae(mask) => m.record_mae(&mut tape, pixels, img, mask).unwrap(),
    };
    tape.scalar(l)
}

/// Worst per-group relative error `|g − fd| / (|g| + |fd|)`.
fn gradcheck(mut m: HieraLite, img: &Grid, task: Objective) -> Result<(f64, usize), String> {
    let count = m.params().scalar_count();
    ensure(count <= 10_000, || format!("{count} parameters"))?;
    match &task {
        Objective::Classify(label) => drop(m.accumulate_classify(img, *label, 1.0).map_err(|e| e.to_string())?),
        Objective::Mae(mask) => drop(m.accumulate_mae(img, mask, 1.0).map_err(|e| e.to_string())?),
    }
    let h = 1e-4;
    let mut worst = 0.0f64;
    let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let analytic = m.params().get(&name).unwrap().grad.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = m.params().get(&name).unwrap().value[i];
            m.params_mut().get_mut(&name).unwrap().value[i] = orig + h;
            let up = objective(&m, img, &task);
            m.params_mut().get_mut(&name).unwrap().value[i] = orig - h;
            let down = objective(&m, img, &task);
            m.params_mut().get_mut(&name).unwrap().value[i] = orig;
            *n = (up - down) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic) + norm(&numeric);
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        ensure(rel < 1e-4, || format!("{name}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    Ok((worst, count))
}

fn gradcheck_spec(head: HeadKind, mode: EmbedMode) -> ModelSpec {
    ModelSpec {
        input_grid: 8,
        stage_depths: vec![1, 1],
        stage_dims: vec![8, 12],
        stage_heads: vec![2, 2],
        stage_window_sizes: vec![Some(4), None],
        relpos_global: true,
        embed_mode: mode,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        head,
        ..ModelSpec::toy()
    }
}

fn perturbed(spec: ModelSpec, seed: u64, grid: usize) -> (HieraLite, Grid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = HieraLite::new(spec, &mut rng).unwrap();
    for p in m.params_mut().iter_mut() {
        for v in p.value.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let m = m.adapt_resolution(grid).unwrap();
    let img = random_grid(&mut rng, grid, grid, 3);
    (m, img)
}

fn gradient_correctness() -> Outcome {
    let mut report = Vec::new();
    let classify = HeadKind::Classify { classes: 3 };
    let mae = HeadKind::Mae { mask_ratio: 0.5 };
    let cases = [
        ("classify/abswin", gradcheck_spec(classify, EmbedMode::AbsWin), 8, Objective::Classify(1)),
        ("classify/naive@10", gradcheck_spec(classify, EmbedMode::Naive), 10, Objective::Classify(2)),
        ("mae/abswin", gradcheck_spec(mae, EmbedMode::AbsWin), 8, Objective::Mae(vec![true, false, false, true])),
        ("mae/naive", gradcheck_spec(mae, EmbedMode::Naive), 8, Objective::Mae(vec![false, true, true, false])),
    ];
    for (i, (name, spec, grid, task)) in cases.into_iter().enumerate() {
        let (m, img) = perturbed(spec, i as u64, grid);
        let (worst, count) = gradcheck(m, &img, task).map_err(|e| format!("{name}: {e}"))?;
        report.push(format!("{name} {count}p {worst:.1e}"));
    }
    Ok(report.join(", "))
}

// ---------------------------------------------------------------- 6, 7, 8

const MAE_STEPS: usize = 500;
const FINETUNE_STEPS: usize = 2000;
const RESET_STEPS: usize = 1000;
const SEEDS: u64 = 3;

fn experiment(seed: u64, mode: EmbedMode, task: Task, steps: usize) -> ExperimentConfig {
    ExperimentConfig { seed, embed_mode: mode, task, steps, ..ExperimentConfig::default() }
}

fn pretrain(seed: u64, mode: EmbedMode) -> Result<(HieraLite, f64, f64), String> {
    let out = run_pretrain(&experiment(seed, mode, Task::Mae, MAE_STEPS)).map_err(|e| e.to_string())?;
    Ok((out.model, out.report.first().unwrap(), out.report.last().unwrap()))
}

fn finetune_accuracy(model: &HieraLite, seed: u64, grid: usize) -> Result<f64, String> {
    let cfg = ExperimentConfig { finetune_grid: grid, ..experiment(seed, model.spec().embed_mode, Task::PosProbe, FINETUNE_STEPS) };
    let out = run_finetune(&cfg, model).map_err(|e| e.to_string())?;
    out.metrics.get_f64("eval_accuracy").ok_or_else(|| "no eval_accuracy".into())
}

struct Headline {
    naive20: Vec<f64>,
    abswin20: Vec<f64>,
    abswin16: Vec<f64>,
    /// (mode, seed, initial, final) window similarity during MAE pretraining.
    mae_similarity: Vec<(EmbedMode, f64, f64)>,
    scratch_similarity: Vec<f64>,
}

fn run_headline() -> Result<Headline, String> {
    let mut h = Headline {
        naive20: vec![],
        abswin20: vec![],
        abswin16: vec![],
        mae_similarity: vec![],
        scratch_similarity: vec![],
    };
    for seed in 0..SEEDS {
        let (naive, n0, n1) = pretrain(seed, EmbedMode::Naive)?;
        let (abswin, a0, a1) = pretrain(seed, EmbedMode::AbsWin)?;
        h.mae_similarity.push((EmbedMode::Naive, n0, n1));
        h.mae_similarity.push((EmbedMode::AbsWin, a0, a1));
        h.naive20.push(finetune_accuracy(&naive, seed, 20)?);
        h.abswin20.push(finetune_accuracy(&abswin, seed, 20)?);
        h.abswin16.push(finetune_accuracy(&abswin, seed, 16)?);
        let scratch = run_pretrain(&experiment(seed, EmbedMode::Naive, Task::PosProbe, MAE_STEPS)).map_err(|e| e.to_string())?;
        h.scratch_similarity.push(scratch.report.last().unwrap());
        println!(
            "    seed {seed}: acc naive@20 {:.3} abswin@20 {:.3} abswin@16 {:.3}; sim mae naive {n0:.3}->{n1:.3} abswin {a0:.3}->{a1:.3} scratch {:.3}",
            h.naive20[seed as usize], h.abswin20[seed as usize], h.abswin16[seed as usize], h.scratch_similarity[seed as usize]
        );
    }
    Ok(h)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn headline_experiment(h: &Headline) -> Outcome {
    let (n20, a20, a16) = (mean(&h.naive20), mean(&h.abswin20), mean(&h.abswin16));
    let summary = format!("mean acc naive@20 {n20:.4}, abswin@20 {a20:.4}, abswin@16 {a16:.4}");
    ensure(a20 >= n20, || format!("abswin below naive: {summary}"))?;
    ensure(a20 >= a16 - 0.02, || format!("abswin@20 more than 2 points below abswin@16: {summary}"))?;
    Ok(summary)
}

fn similarity_dynamics(h: &Headline) -> Outcome {
    let mut notes = Vec::new();
    for mode in [EmbedMode::Naive, EmbedMode::AbsWin] {
        let rising = h.mae_similarity.iter().filter(|(m, a, b)| *m == mode && b > a).count();
        notes.push(format!("mae {} rises {rising}/3", mode.as_str()));
        ensure(rising >= 2, || notes.join(", "))?;
    }
    let naive_final: Vec<f64> = h.mae_similarity.iter().filter(|r| r.0 == EmbedMode::Naive).map(|r| r.2).collect();
    let below = h.scratch_similarity.iter().zip(&naive_final).filter(|(s, m)| s < m).count();
    notes.push(format!("supervised below mae {below}/3"));
    ensure(below >= 2, || notes.join(", "))?;
    Ok(notes.join(", "))
}

fn reset_experiment() -> Outcome {
    let mut recovered = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let (model, _, _) = pretrain(seed, EmbedMode::Naive)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = ExperimentConfig { finetune_grid: 16, ..experiment(seed, EmbedMode::Naive, Task::Texture, RESET_STEPS) };
        let mut model = model.with_classify_head(cfg.classes(), &mut rng).map_err(|e| e.to_string())?;
        model.reset_position_embedding(&mut rng);
        let baseline = model.window_similarity().map_err(|e| e.to_string())?;
        let out = run_finetune(&cfg, &model).map_err(|e| e.to_string())?;
        let after = out.report.last().unwrap();
        recovered += usize::from(after > baseline);
        notes.push(format!("{baseline:.3}->{after:.3}"));
    }
    let summary = format!("similarity after reset and {RESET_STEPS} steps: {} ({recovered}/3 above baseline)", notes.join(", "));
    ensure(recovered >= 2, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 9

fn latency_direction() -> Outcome {
    let layer = |window_size, use_relpos| AttentionLayerConfig { dim: 16, heads: 1, window_size, use_relpos };
    let (batch, iters) = (8, 4);
    let relpos = bench_attention(&layer(None, false), &layer(None, true), 64, batch, iters).map_err(|e| e.to_string())?;
    let window = bench_attention(&layer(Some(8), false), &layer(None, false), 64, batch, iters).map_err(|e| e.to_string())?;
    let summary = format!(
        "64x64 batch 8: global {:.1} ms, global+relpos {:.1} ms (x{:.2}), window8 {:.1} ms",
        relpos.a.median_ms,
        relpos.b.median_ms,
        relpos.ratio(),
        window.a.median_ms
    );
    ensure(relpos.ratio() >= 1.1, || format!("relpos slowdown below 1.1: {summary}"))?;
    ensure(window.a.median_ms < window.b.median_ms, || format!("windowed not faster than global: {summary}"))?;
    let csv = latency_csv(&[relpos.a, relpos.b, window.a], "check");
    ensure(csv.lines().nth(1) == Some(BENCH_COLUMNS), || "latency csv header".into())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 10

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small(seed: u64, mode: EmbedMode, task: Task, steps: usize, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        pretrain_grid: 8,
        finetune_grid: 10,
        samples: 40,
        track_every: 2,
        bench_grids: vec![8],
        bench_iters: 2,
        bench_batch: 1,
        output_dir: dir.to_path_buf(),
        ..experiment(seed, mode, task, steps)
    }
}

/// Runs every command into `root` and validates each artifact's format.
fn produce_artifacts(root: &Path) -> Result<usize, String> {
    let err = |e: abswin::CliError| e.to_string();
    let mut checked = 0;
    for mode in [EmbedMode::Naive, EmbedMode::AbsWin] {
        let m = mode.as_str();
        let pre_cfg = small(5, mode, Task::Mae, 3, &root.join(format!("{m}/pre")));
        let pre = cmd_pretrain(&pre_cfg).map_err(err)?;
        let ck = Checkpoint::load(&root.join(format!("{m}/pre/checkpoint"))).map_err(err)?;
        let same = ck.model.spec() == pre.model.spec()
            && ck.model.params().iter().zip(pre.model.params().iter()).all(|(a, b)| a.name == b.name && a.value == b.value);
        ensure(same, || "checkpoint reload differs".into())?;
        ensure(ck.metadata.get("config_hash") == Some(&pre_cfg.hash()), || "checkpoint lacks config hash".into())?;
        let sim = fs::read_to_string(root.join(format!("{m}/pre/{}_similarity.csv", pre.report.run_id))).unwrap();
        ensure(SimilarityReport::from_csv(&sim).map_err(|e| e.to_string())? == pre.report, || "similarity csv".into())?;
        ensure(sim.contains(&format!("config_hash={}", pre_cfg.hash())) && sim.contains("seed=5"), || "similarity metadata".into())?;
        let metrics = Metrics::from_csv(&fs::read_to_string(root.join(format!("{m}/pre/metrics.csv"))).unwrap()).map_err(err)?;
        ensure(metrics == pre.metrics, || "metrics csv".into())?;

        let ft_cfg = small(5, mode, Task::PosProbe, 2, &root.join(format!("{m}/ft")));
        cmd_finetune(&ft_cfg, &root.join(format!("{m}/pre/checkpoint"))).map_err(err)?;
        let wrong = ExperimentConfig {
            embed_mode: if mode == EmbedMode::Naive { EmbedMode::AbsWin } else { EmbedMode::Naive },
            ..ft_cfg.clone()
        };
        let code = cmd_finetune(&wrong, &root.join(format!("{m}/pre/checkpoint"))).map(|_| 0).unwrap_or_else(|e| e.exit_code());
        ensure(code == 2, || format!("embed mode mismatch exit code {code}"))?;

        let an = root.join(format!("{m}/analyze"));
        let summary = cmd_analyze(&root.join(format!("{m}/ft/checkpoint")), &an).map_err(err)?;
        let run = summary.get("run_id").unwrap().to_string();
        for (name, bytes) in read_dir_sorted(&an) {
            if name.ends_with(".pgm") {
                let pgm = decode_pgm(&bytes).map_err(|e| format!("{name}: {e}"))?;
                ensure(pgm.width == 10 || pgm.width == 4, || format!("{name}: width {}", pgm.width))?;
                ensure(pgm.comments.iter().any(|c| c.contains("config_hash=")), || format!("{name}: no metadata"))?;
                checked += 1;
            }
        }
        let maps = parse_token_maps_csv(&fs::read_to_string(an.join(format!("{run}_token_maps.csv"))).unwrap())
            .map_err(|e| e.to_string())?;
        ensure(maps.len() == 16 && maps.iter().all(|r| r.len() == 16), || "token map shape".into())?;
        if mode == EmbedMode::AbsWin {
            let a = decode_pgm(&fs::read(an.join(format!("{run}_window_ch0.pgm"))).unwrap()).map_err(|e| e.to_string())?;
            let full = decode_pgm(&fs::read(an.join(format!("{run}_ch0.pgm"))).unwrap()).map_err(|e| e.to_string())?;
            ensure(a.pixels.len() == 16 && full.pixels.len() == 100, || "pgm sizes".into())?;
        }
        for dir in ["pre", "ft", "analyze"] {
            checked += verify_manifest(&root.join(format!("{m}/{dir}"))).map_err(err)?;
        }
        let embed = decode_embed(&fs::read(root.join(format!("{m}/pre/checkpoint/embed.pemb"))).unwrap()).map_err(err)?;
        ensure(decode_embed(&encode_embed(&embed).map_err(err)?).map_err(err)? == embed, || "pemb round trip".into())?;
        let demo_cfg = small(5, mode, Task::Mae, 0, &root.join(format!("{m}/demo")));
        let align = cmd_demo_detection_embed(&demo_cfg, &root.join(format!("{m}/pre/checkpoint/embed.pemb")), 20, Some(8))
            .map_err(err)?;
        ensure(align.rows.iter().all(|r| (r.3 - 1.0).abs() < 1e-9), || "tiled column not 1.0".into())?;
        let tiled = decode_embed(&fs::read(root.join(format!("{m}/demo/detection_tiled.pemb"))).unwrap()).map_err(err)?;
        ensure(matches!(tiled, EmbedFile::Naive(ref n) if n.grid.height() == 20), || "tiled pemb".into())?;
        checked += verify_manifest(&root.join(format!("{m}/demo"))).map_err(err)?;
    }
    let bench_cfg = small(5, EmbedMode::AbsWin, Task::Mae, 0, &root.join("bench"));
    let rows = cmd_bench(&bench_cfg, false).map_err(err)?;
    let csv = fs::read_to_string(root.join("bench/latency.csv")).unwrap();
    ensure(csv.lines().nth(1) == Some(BENCH_COLUMNS) && csv.lines().count() == 2 + rows.len() && rows.len() == 4, || {
        "latency csv rows".into()
    })?;
    checked += verify_manifest(&root.join("bench")).map_err(err)?;
    Ok(checked)
}

fn interface_contracts() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let checked = produce_artifacts(a.path())?;
    produce_artifacts(b.path())?;
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    ensure(fa.len() == fb.len(), || "reruns wrote different file sets".into())?;
    let mut compared = 0;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        ensure(na == nb, || format!("{na} vs {nb}"))?;
        if na.starts_with("bench") {
            continue;
        }
        ensure(ba == bb, || format!("{na} differs between identical-seed reruns"))?;
        compared += 1;
    }
    Ok(format!("{checked} artifacts validated, {compared} byte-identical across reruns (timings exempt)"))
}

// ----------------------------------------------------------------

fn run(id: usize, title: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = f();
    let took = t.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    println!("{} criterion {id:>2} {title}: {detail} [{took:.1?}]", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mins = |m: u64| Duration::from_secs(60 * m);
    let mut results = BTreeMap::new();
    results.insert(1, run(1, "bicubic oracle", Duration::from_secs(10), &mut bicubic_oracle));
    results.insert(2, run(2, "window alignment", Duration::from_secs(10), &mut window_alignment));
    results.insert(3, run(3, "bug witness", Duration::from_secs(5), &mut bug_witness));
    results.insert(4, run(4, "recursive construction", Duration::from_secs(5), &mut recursive_construction));
    results.insert(5, run(5, "gradient correctness", mins(2), &mut gradient_correctness));

    let t = Instant::now();
    let headline = run_headline();
    let shared = t.elapsed();
    let from_headline = |f: fn(&Headline) -> Outcome| {
        let h = headline.as_ref().map_err(Clone::clone)?;
        ensure(shared <= mins(15), || format!("experiment took {shared:.1?}"))?;
        f(h).map(|d| format!("{d}; shared run {shared:.1?}"))
    };
    println!("    headline experiment ran in {shared:.1?}");
    results.insert(6, run(6, "headline experiment", mins(15), &mut || from_headline(headline_experiment)));
    results.insert(7, run(7, "similarity dynamics", mins(15), &mut || from_headline(similarity_dynamics)));
    results.insert(8, run(8, "reset experiment", mins(10), &mut reset_experiment));
    results.insert(9, run(9, "latency direction", mins(2), &mut latency_direction));
    results.insert(10, run(10, "interface contracts", mins(1), &mut interface_contracts));

    let failed: Vec<_> = results.iter().filter(|(_, ok)| !**ok).map(|(id, _)| *id).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
