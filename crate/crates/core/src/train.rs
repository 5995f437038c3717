//! Minibatch training loops for both heads.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{argmax, HieraLite};
use crate::params::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub layer_decay: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig { steps, batch: 8, optimizer: OptimizerKind::adamw(1e-3, 0.05), layer_decay: None, seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Fraction of correct predictions per step (classification only).
    pub accuracies: Vec<f64>,
}

/// Called before the first step with `0` and after every step `s` with `s`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &HieraLite) -> Result<()>;

fn optimizer(cfg: &TrainConfig) -> Optimizer {
    let opt = Optimizer::new(cfg.optimizer);
    match cfg.layer_decay {
        Some(f) => opt.with_layer_decay(f),
        None => opt,
    }
}

fn check(cfg: &TrainConfig, pool: &[usize]) -> Result<()> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if pool.is_empty() && cfg.steps > 0 {
        return Err(Error::invalid("no training samples"));
    }
    Ok(())
}

/// Softmax cross-entropy training on samples drawn uniformly (with
/// replacement) from `pool`.
pub fn train_classify(
    model: &mut HieraLite,
    sample: &dyn Fn(usize) -> (Grid, usize),
    pool: &[usize],
    cfg: &TrainConfig,
    hook: StepHook<'_>,
) -> Result<TrainLog> {
    check(cfg, pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = optimizer(cfg);
    let mut log = TrainLog::default();
    hook(0, model)?;
    let scale = 1.0 / cfg.batch as f64;
    for step in 1..=cfg.steps {
        let (mut loss, mut correct) = (0.0, 0usize);
        for _ in 0..cfg.batch {
            let (img, label) = sample(pool[rng.gen_range(0..pool.len())]);
            let (l, logits) = model.accumulate_classify(&img, label, scale)?;
            loss += l * scale;
            correct += usize::from(argmax(&logits) == label);
        }
        opt.step(model.params_mut())?;
        log.losses.push(loss);
        log.accuracies.push(correct as f64 * scale);
        hook(step, model)?;
    }
    Ok(log)
}

/// Masked reconstruction training with a fresh random mask per sample.
pub fn train_mae(
    model: &mut HieraLite,
    sample: &dyn Fn(usize) -> Grid,
    pool: &[usize],
    cfg: &TrainConfig,
    hook: StepHook<'_>,
) -> Result<TrainLog> {
    check(cfg, pool)?;
    model.spec().validate_for_pretraining()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = optimizer(cfg);
    let mut log = TrainLog::default();
    hook(0, model)?;
    let scale = 1.0 / cfg.batch as f64;
    for step in 1..=cfg.steps {
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let img = sample(pool[rng.gen_range(0..pool.len())]);
            let mask = model.random_mask(&mut rng);
            loss += model.accumulate_mae(&img, &mask, scale)? * scale;
        }
        opt.step(model.params_mut())?;
        log.losses.push(loss);
        hook(step, model)?;
    }
    Ok(log)
}

/// Top-1 accuracy over `indices`.
pub fn evaluate(model: &HieraLite, sample: &dyn Fn(usize) -> (Grid, usize), indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("no evaluation samples"));
    }
    let mut correct = 0usize;
    for &i in indices {
        let (img, label) = sample(i);
        correct += usize::from(model.predict(&img)? == label);
    }
    Ok(correct as f64 / indices.len() as f64)
}
