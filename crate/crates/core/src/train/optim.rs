//! Adafactor with factored second moments, and an AdamW fallback.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{Gradients, ParamStore};
use crate::real::Real;
use crate::train::schedule::{cosine_lr, warmup_steps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adafactor,
    AdamFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "OptimizerConfig::default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "OptimizerConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "OptimizerConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "OptimizerConfig::default_lr")]
    pub learning_rate_init: f64,
    #[serde(default = "OptimizerConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "OptimizerConfig::default_schedule")]
    pub schedule: Schedule,
    /// Zero means "derive from epochs and batch size".
    #[serde(default)]
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adafactor,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate_init: 1e-3,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            total_steps: 0,
        }
    }
}

pub const CLIP_THRESHOLD: f64 = 1.0;
const FACTOR_EPS: f64 = 1e-30;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerConfig {
    fn default_kind() -> OptimizerKind {
        OptimizerKind::Adafactor
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_schedule() -> Schedule {
        Schedule::Cosine
    }

    pub fn adam() -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamFallback, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                bail!(Config, "{} must lie in (0, 1), got {}", name, b);
            }
        }
        if !(self.learning_rate_init > 0.0 && self.learning_rate_init.is_finite()) {
            bail!(Config, "learning_rate_init must be positive, got {}", self.learning_rate_init);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be nonnegative, got {}", self.weight_decay);
        }
        Ok(())
    }

    /// Scheduled rate before update `step` (0-based) of `total_steps`.
    pub fn learning_rate(&self, step: usize) -> Result<f64> {
        if self.total_steps == 0 {
            bail!(Config, "total_steps is not set");
        }
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, self.total_steps, self.learning_rate_init, warmup_steps(self.total_steps)),
        }
    }
}

/// Second-moment state of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondMoment {
    /// Row and column accumulators of a `[rows, cols]` view.
    Factored { rows: usize, cols: usize, row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Slot {
    momentum: Vec<f64>,
    second: SecondMoment,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Slot>,
    step: usize,
}

impl Optimizer {
    pub fn new<T: Real>(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let slots = params
            .iter()
            .map(|p| {
                let n = p.value.numel();
                let shape = p.value.shape();
                let second = match (config.kind, shape.len()) {
                    (OptimizerKind::Adafactor, r) if r >= 2 => {
                        let cols = shape[r - 1];
                        let rows = n / cols;
                        SecondMoment::Factored { rows, cols, row: vec![0.0; rows], col: vec![0.0; cols] }
                    }
                    _ => SecondMoment::Full(vec![0.0; n]),
                };
                Slot { momentum: vec![0.0; n], second }
            })
            .collect();
        Ok(Optimizer { config, slots, step: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn second_moment(&self, index: usize) -> &SecondMoment {
        &self.slots[index].second
    }

    /// Applies one update at learning rate `lr`. Parameters without a gradient are left alone.
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    bail!(Numeric, "gradient of `{}` is not finite", params.name(id));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc2 = 1.0 - libm::pow(b2, t as f64);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let g: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let slot = &mut self.slots[id.0];
            let decays = params.get(id).shape().len() >= 2;
            let mut u = vec![0.0; g.len()];
            match (&mut slot.second, c.kind) {
                (SecondMoment::Factored { rows, cols, row, col }, OptimizerKind::Adafactor) => {
                    let (r, k) = (*rows, *cols);
                    for i in 0..r {
                        let m = g[i * k..(i + 1) * k].iter().map(|x| x * x + FACTOR_EPS).sum::<f64>() / k as f64;
                        row[i] = b2 * row[i] + (1.0 - b2) * m;
                    }
                    for j in 0..k {
                        let m = (0..r).map(|i| g[i * k + j] * g[i * k + j] + FACTOR_EPS).sum::<f64>() / r as f64;
                        col[j] = b2 * col[j] + (1.0 - b2) * m;
                    }
                    let row_mean = row.iter().sum::<f64>() / r as f64 / bc2;
                    for i in 0..r {
                        for j in 0..k {
                            let v = (row[i] / bc2) * (col[j] / bc2) / row_mean;
                            u[i * k + j] = g[i * k + j] / libm::sqrt(v);
                        }
                    }
                }
                (SecondMoment::Full(v), OptimizerKind::Adafactor) => {
                    for (i, &gi) in g.iter().enumerate() {
                        v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi + FACTOR_EPS);
                        u[i] = gi / libm::sqrt(v[i] / bc2);
                    }
                }
                (SecondMoment::Full(v), OptimizerKind::AdamFallback) => {
                    let bc1 = 1.0 - libm::pow(b1, t as f64);
                    let p = params.get_mut(id);
                    for (i, &gi) in g.iter().enumerate() {
                        slot.momentum[i] = b1 * slot.momentum[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let step = slot.momentum[i] / bc1 / (libm::sqrt(v[i] / bc2) + ADAM_EPS);
                        let w = p.data()[i].as_f64();
                        let decay = if decays { c.weight_decay * w } else { 0.0 };
                        p.data_mut()[i] = T::of(w - lr * (step + decay));
                    }
                    continue;
                }
                (SecondMoment::Factored { .. }, OptimizerKind::AdamFallback) => unreachable!("adam keeps full moments"),
            }
            let rms = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64);
            let scale = 1.0 / (rms / CLIP_THRESHOLD).max(1.0);
            let p = params.get_mut(id);
            for (i, ui) in u.iter().enumerate() {
                slot.momentum[i] = b1 * slot.momentum[i] + (1.0 - b1) * ui * scale;
                let w = p.data()[i].as_f64();
                let decay = if decays { c.weight_decay * w } else { 0.0 };
                p.data_mut()[i] = T::of(w - lr * (slot.momentum[i] + decay));
            }
        }
        Ok(())
    }
}
