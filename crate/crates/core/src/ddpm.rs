//! Variance schedule and the forward/reverse diffusion steps over flattened
//! action sequences.

use std::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on any single-step variance.
pub const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub clip_sample: bool,
}

/// `f(t) = cos^2(((t/K + s) / (1 + s)) * pi/2)` of the cosine schedule.
pub fn cosine_signal(t: f64, steps: usize) -> f64 {
    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0;
    x.cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        let f0 = cosine_signal(0.0, steps);
        let abar = |t: usize| cosine_signal(t as f64, steps) / f0;
        let betas: Vec<f64> = (0..steps).map(|k| (1.0 - abar(k + 1) / abar(k)).min(MAX_BETA)).collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self { betas, alphas, alpha_bars, clip_sample: true }
    }

    pub fn with_clip(mut self, clip: bool) -> Self {
        self.clip_sample = clip;
        self
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Reverse-process standard deviation `sqrt(beta_k)`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.betas[k].sqrt()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::Config(format!("diffusion step {k} outside 0..{}", self.steps())));
        }
        Ok(())
    }
}

fn check_shape(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { expected: a.to_string(), got: b.to_string() });
    }
    Ok(())
}

/// `sqrt(abar_k) * clean + sqrt(1 - abar_k) * noise`.
pub fn add_noise<R: Float>(clean: &[R], noise: &[R], k: usize, sched: &NoiseSchedule) -> Result<Vec<R>> {
    check_shape(clean.len(), noise.len())?;
    sched.check_step(k)?;
    let ab = sched.alpha_bars[k];
    let (a, b) = (R::from(ab.sqrt()).unwrap(), R::from((1.0 - ab).sqrt()).unwrap());
    Ok(clean.iter().zip(noise).map(|(&x, &e)| a * x + b * e).collect())
}

/// One reverse step from `A^k` to `A^{k-1}` given predicted noise and a
/// standard-normal draw `z` (ignored at `k = 0`; pass zeros for the mean path).
pub fn denoise_step<R: Float>(
    noisy: &[R],
    eps_hat: &[R],
    k: usize,
    sched: &NoiseSchedule,
    z: &[R],
) -> Result<Vec<R>> {
    check_shape(noisy.len(), eps_hat.len())?;
    check_shape(noisy.len(), z.len())?;
    sched.check_step(k)?;
    let inv_sqrt_alpha = R::from(1.0 / sched.alphas[k].sqrt()).unwrap();
    let coef = R::from(sched.betas[k] / (1.0 - sched.alpha_bars[k]).sqrt()).unwrap();
    let sigma = if k > 0 { R::from(sched.sigma(k)).unwrap() } else { R::zero() };
    let one = R::one();
    Ok(noisy
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &n)| {
            let v = inv_sqrt_alpha * (x - coef * e) + sigma * n;
            if sched.clip_sample {
                v.max(-one).min(one)
            } else {
                v
            }
        })
        .collect())
}

/// Mean squared error over every element.
pub fn epsilon_loss<R: Float>(eps_true: &[R], eps_pred: &[R]) -> Result<f64> {
    if eps_true.is_empty() {
        return Err(Error::Empty("noise batch"));
    }
    check_shape(eps_true.len(), eps_pred.len())?;
    let sum: f64 = eps_true
        .iter()
        .zip(eps_pred)
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / eps_true.len() as f64)
}
