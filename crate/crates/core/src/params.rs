//! Named parameter tensors with paired gradient buffers, and the optimizers
//! that update them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Depth used for layer-wise learning-rate decay (0 = input side).
    pub depth: usize,
}

impl Param {
    pub fn mat(&self) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.value.clone() }
    }

    pub fn is_position_embedding(&self) -> bool {
        self.name.starts_with("pos.") || self.name.contains("rel_")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    fresh_grads: bool,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        decay: bool,
        depth: usize,
    ) -> Result<usize> {
        if value.len() != rows * cols {
            return Err(Error::invalid(format!("parameter {name}: {} values for {rows}x{cols}", value.len())));
        }
        if let Some(&id) = self.index.get(name) {
            let p = &mut self.params[id];
            *p = Param { name: name.to_string(), rows, cols, grad: vec![0.0; value.len()], value, decay, depth };
            return Ok(id);
        }
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), rows, cols, grad: vec![0.0; value.len()], value, decay, depth });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn require(&self, name: &str) -> Result<&Param> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Records parameter `name` on `tape`.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.id(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        Ok(tape.param(id, self.params[id].mat()))
    }

    /// Adds `scale ×` the tape's parameter gradients into the gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients, scale: f64) {
        for (id, g) in tape.param_grads(grads) {
            if let Some(p) = self.params.get_mut(id) {
                for (d, v) in p.grad.iter_mut().zip(&g.data) {
                    *d += scale * v;
                }
            }
        }
        self.fresh_grads = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.fresh_grads = false;
    }

    pub fn has_fresh_grads(&self) -> bool {
        self.fresh_grads
    }

    pub fn max_depth(&self) -> usize {
        self.params.iter().map(|p| p.depth).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    AdamW { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerKind::AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::AdamW { lr, .. } => lr,
        }
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Per-depth multiplicative learning-rate factor; `None` disables it.
    pub layer_decay: Option<f64>,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, layer_decay: None, first: BTreeMap::new(), second: BTreeMap::new(), t: 0 }
    }

    pub fn with_layer_decay(mut self, factor: f64) -> Self {
        self.layer_decay = Some(factor);
        self
    }

    fn lr_scale(&self, depth: usize, max_depth: usize) -> f64 {
        match self.layer_decay {
            Some(f) => libm::pow(f, (max_depth - depth) as f64),
            None => 1.0,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if !params.fresh_grads {
            return Err(Error::state("optimizer step without fresh gradients"));
        }
        self.t += 1;
        let max_depth = params.max_depth();
        for i in 0..params.params.len() {
            let scale = self.lr_scale(params.params[i].depth, max_depth);
            let p = &mut params.params[i];
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let lr = lr * scale;
                    if momentum == 0.0 {
                        for (v, g) in p.value.iter_mut().zip(&p.grad) {
                            *v -= lr * g;
                        }
                    } else {
                        let buf = self.first.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
                        for ((v, g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                            *b = momentum * *b + g;
                            *v -= lr * *b;
                        }
                    }
                }
                OptimizerKind::AdamW { lr, beta1, beta2, eps, weight_decay } => {
                    let lr = lr * scale;
                    let m = self.first.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
                    let s = self.second.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.value.len()]);
                    let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
                    let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
                    let wd = if p.decay { weight_decay } else { 0.0 };
                    for k in 0..p.value.len() {
                        let g = p.grad[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        s[k] = beta2 * s[k] + (1.0 - beta2) * g * g;
                        let mhat = m[k] / bc1;
                        let shat = s[k] / bc2;
                        p.value[k] -= lr * wd * p.value[k];
                        p.value[k] -= lr * mhat / (libm::sqrt(shat) + eps);
                    }
                }
            }
        }
        params.step += 1;
        params.zero_grads();
        Ok(())
    }
}
