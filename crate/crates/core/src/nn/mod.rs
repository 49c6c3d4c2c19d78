//! Noise-prediction network, its training gradients and optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use gradcheck::{check_gradients, GradCheck};
pub use layers::{Feat, Rows};
pub use optim::{adamw_step, lr_at_step, AdamState, AdamWConfig, Ema};
pub use params::{Gradients, ParamId, ParamSpec, ParameterStore};
pub use real::Real;
pub use unet::{sinusoidal_embedding, ConditionalUnet1d, NetworkConfig};

use crate::ddpm::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};

/// One training batch: `b` observations and clean normalized action
/// sequences of `horizon x action_dim`, both batch-major.
#[derive(Debug, Clone)]
pub struct Batch<R> {
    pub b: usize,
    pub horizon: usize,
    pub obs: Vec<R>,
    pub actions: Vec<R>,
}

fn noisy_inputs<R: Real>(
    net: &ConditionalUnet1d,
    sched: &NoiseSchedule,
    batch: &Batch<R>,
    steps: &[usize],
    noise: &[R],
) -> Result<(Feat<R>, Rows<R>, Feat<R>)> {
    if batch.b == 0 {
        return Err(Error::Empty("training batch"));
    }
    let cfg = net.config();
    let per = batch.horizon * cfg.input_channels;
    if batch.actions.len() != batch.b * per || noise.len() != batch.actions.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} action values", batch.b * per),
            got: format!("{} actions, {} noise", batch.actions.len(), noise.len()),
        });
    }
    if steps.len() != batch.b {
        return Err(Error::ShapeMismatch { expected: format!("{} steps", batch.b), got: steps.len().to_string() });
    }
    if batch.obs.len() != batch.b * cfg.cond_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{} observation values", batch.b * cfg.cond_dim),
            got: batch.obs.len().to_string(),
        });
    }
    let mut noisy = Vec::with_capacity(batch.actions.len());
    for (i, &k) in steps.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        noisy.extend(add_noise(&batch.actions[r.clone()], &noise[r], k, sched)?);
    }
    let x = unet::sequences_to_feat(&noisy, batch.b, batch.horizon, cfg.input_channels);
    let obs = Rows { b: batch.b, f: cfg.cond_dim, data: batch.obs.clone() };
    let target = unet::sequences_to_feat(noise, batch.b, batch.horizon, cfg.input_channels);
    Ok((x, obs, target))
}

/// Mean-squared noise-prediction loss without gradients.
pub fn loss_value<R: Real>(
    net: &ConditionalUnet1d,
    params: &ParameterStore<R>,
    sched: &NoiseSchedule,
    batch: &Batch<R>,
    steps: &[usize],
    noise: &[R],
) -> Result<f64> {
    let (x, obs, target) = noisy_inputs(net, sched, batch, steps, noise)?;
    let pred = net.forward(params, &x, steps, &obs)?;
    crate::ddpm::epsilon_loss(&target.data, &pred.data)
}

/// Mean-squared noise-prediction loss and its gradient for every parameter.
///
/// `steps[i]` and the noise block `noise[i]` are applied to sample `i`.
pub fn loss_gradients<R: Real>(
    net: &ConditionalUnet1d,
    params: &ParameterStore<R>,
    sched: &NoiseSchedule,
    batch: &Batch<R>,
    steps: &[usize],
    noise: &[R],
) -> Result<(f64, Gradients<R>)> {
    let (x, obs, target) = noisy_inputs(net, sched, batch, steps, noise)?;
    let (pred, tape) = net.forward_tape(params, &x, steps, &obs)?;

    let n = pred.len() as f64;
    let scale = R::lit(2.0 / n);
    let mut loss = 0.0;
    let mut dout = Feat::zeros(pred.c, pred.b, pred.t);
    for ((d, &p), &t) in dout.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let e = p - t;
        loss += e.to_f64().unwrap().powi(2);
        *d = scale * e;
    }
    loss /= n;
    if !loss.is_finite() {
        let param = params.first_non_finite().unwrap_or("input").to_string();
        return Err(Error::NonFiniteLoss { step: 0, param });
    }
    let grads = net.backward(params, &tape, &dout);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteLoss { step: 0, param: name.to_string() });
    }
    Ok((loss, grads))
}
