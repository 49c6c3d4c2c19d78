//! Noise-prediction training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainingSample;
use crate::ddpm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{
    adamw_step, loss_gradients, lr_at_step, AdamState, AdamWConfig, Batch, Checkpoint, CheckpointMeta,
    ConditionalUnet1d, Ema, NetworkConfig, ParameterStore,
};
use crate::policy::{Normalizer, PolicyConfig, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, warmup_steps: 1000, max_steps: None, seed: 0, optimizer: AdamWConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub fn gaussian_f32<G: Rng + ?Sized>(rng: &mut G, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

fn assemble(samples: &[&TrainingSample]) -> Batch<f32> {
    let horizon = samples[0].actions.len() / ACTION_DIM;
    Batch {
        b: samples.len(),
        horizon,
        obs: samples.iter().flat_map(|s| s.obs.iter().map(|&v| v as f32)).collect(),
        actions: samples.iter().flat_map(|s| s.actions.iter().map(|&v| v as f32)).collect(),
    }
}

/// Loss over `draws` fixed `(k, noise)` draws per sample, seeded by `seed`.
pub fn fixed_draw_loss(
    net: &ConditionalUnet1d,
    params: &ParameterStore<f32>,
    sched: &NoiseSchedule,
    samples: &[TrainingSample],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let batch = assemble(&refs);
    let mut total = 0.0;
    for _ in 0..draws {
        let steps: Vec<usize> = (0..batch.b).map(|_| rng.random_range(0..sched.steps())).collect();
        let noise = gaussian_f32(&mut rng, batch.actions.len());
        total += crate::nn::loss_value(net, params, sched, &batch, &steps, &noise)?;
    }
    Ok(total / draws as f64)
}

/// Trains a fresh network; the checkpoint's inference weights are the EMA.
pub fn train(
    samples: &[TrainingSample],
    net_cfg: &NetworkConfig,
    policy: &PolicyConfig,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<TrainOutput> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    policy.validate()?;
    let net = ConditionalUnet1d::new(NetworkConfig { cond_dim: policy.obs_dim(), ..net_cfg.clone() })?;
    let sched = NoiseSchedule::cosine(policy.diffusion_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParameterStore<f32> = net.init_params(&mut rng);
    let mut ema = Ema::new(&params);
    let mut opt = AdamState::new(params.len());

    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let planned = per_epoch * cfg.epochs;
    let total = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                if count > 0 {
                    epoch_losses.push(sum / count as f64);
                }
                break 'outer;
            }
            let refs: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = assemble(&refs);
            let ks: Vec<usize> = (0..batch.b).map(|_| rng.random_range(0..sched.steps())).collect();
            let noise = gaussian_f32(&mut rng, batch.actions.len());
            let (loss, grads) = loss_gradients(&net, &params, &sched, &batch, &ks, &noise).map_err(|e| match e {
                Error::NonFiniteLoss { param, .. } => Error::NonFiniteLoss { step, param },
                other => other,
            })?;
            let lr = lr_at_step(step, cfg.optimizer.lr, cfg.warmup_steps, total);
            adamw_step(&mut params, &grads, &mut opt, &cfg.optimizer, lr)?;
            ema.update(&params);
            step += 1;
            sum += loss;
            count += 1;
            progress(epoch, step, loss);
        }
        epoch_losses.push(sum / count.max(1) as f64);
    }

    let meta = CheckpointMeta {
        network: net.config().clone(),
        policy: *policy,
        normalizer: normalizer.clone(),
        train_step: step as u64,
    };
    Ok(TrainOutput { checkpoint: Checkpoint { meta, params, ema: ema.params }, epoch_losses, steps: step })
}
