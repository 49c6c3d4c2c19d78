//! AdamW, the learning-rate schedule and the exponential moving average of
//! weights.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1.05e-4, weight_decay: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![R::zero(); len], v: vec![R::zero(); len], step: 0 }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_step<R: Real>(
    params: &mut ParameterStore<R>,
    grads: &Gradients<R>,
    state: &mut AdamState<R>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len().to_string(),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = R::lit(1.0 - lr * cfg.weight_decay);
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let (ob1, ob2) = (R::lit(1.0 - cfg.beta1), R::lit(1.0 - cfg.beta2));
    let step_size = R::lit(lr / bc1);
    let sqrt_bc2 = R::lit(bc2.sqrt());
    let eps = R::lit(cfg.eps);
    for (((p, &g), m), v) in params
        .flat_mut()
        .iter_mut()
        .zip(grads.flat())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p *= decay;
        *m = b1 * *m + ob1 * g;
        *v = b2 * *v + ob2 * g * g;
        *p -= step_size * *m / (v.sqrt() / sqrt_bc2 + eps);
    }
    Ok(())
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at `total`.
pub fn lr_at_step(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Exponential moving average of the weights with a warm-up decay.
#[derive(Debug, Clone)]
pub struct Ema<R> {
    pub params: ParameterStore<R>,
    pub max_decay: f64,
    pub power: f64,
    pub step: u64,
}

impl<R: Real> Ema<R> {
    pub fn new(params: &ParameterStore<R>) -> Self {
        Self { params: params.clone(), max_decay: 0.9999, power: 0.75, step: 0 }
    }

    pub fn decay(&self) -> f64 {
        let d = 1.0 - (1.0 + self.step as f64).powf(-self.power);
        d.clamp(0.0, self.max_decay)
    }

    pub fn update(&mut self, params: &ParameterStore<R>) {
        let d = R::lit(self.decay());
        let od = R::one() - d;
        for (e, &p) in self.params.flat_mut().iter_mut().zip(params.flat()) {
            *e = d * *e + od * p;
        }
        self.step += 1;
    }
}
