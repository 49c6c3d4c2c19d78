//! Episode records, demonstration datasets and training windows.

pub mod metrics;
pub mod render;
pub mod train;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{FormationConfig, PacConfig};
use crate::error::{Error, Result};
use crate::policy::{build_observation, run_episode, Controller, Normalizer, PolicyConfig, ACTION_DIM, STATE_DIM};
use crate::world::{sample_environment, Environment, Outcome, WorldConfig};

pub use metrics::{compute_metrics, evaluate_policy, EpisodeMetrics, MetricsReport, PolicyReport};
pub use render::render_svg;
pub use train::{fixed_draw_loss, train, TrainConfig, TrainOutput};

/// Per-step trace of one episode. Every array has one entry per visited
/// state; `actions[t]` is applied in `states[t]` and the terminal entry
/// repeats the last executed action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: Environment,
    pub policy: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub leaders: Vec<[[f64; 2]; 2]>,
    pub followers: Vec<Vec<[f64; 2]>>,
    pub clearance: Vec<f64>,
}

impl EpisodeRecord {
    pub fn new(env: Environment, policy: String, seed: u64) -> Self {
        Self {
            env,
            policy,
            seed,
            outcome: Outcome::Running,
            states: Vec::new(),
            actions: Vec::new(),
            leaders: Vec::new(),
            followers: Vec::new(),
            clearance: Vec::new(),
        }
    }

    /// Number of executed world steps.
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn executed_actions(&self) -> &[[f64; ACTION_DIM]] {
        &self.actions[..self.steps().min(self.actions.len())]
    }

    pub fn check(&self) -> Result<()> {
        let n = self.states.len();
        if [self.actions.len(), self.leaders.len(), self.followers.len(), self.clearance.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Dataset(format!("episode {} has arrays of unequal length", self.seed)));
        }
        if self.outcome == Outcome::Running {
            return Err(Error::Dataset(format!("episode {} has no outcome", self.seed)));
        }
        Ok(())
    }
}

pub fn write_ndjson(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

/// Seed of item `index` in an independent stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_DATASET: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

/// Environments `0..count` of a seed stream.
pub fn sample_environments(base: u64, stream: u64, count: usize, world: &WorldConfig) -> Result<Vec<Environment>> {
    (0..count as u64)
        .map(|i| sample_environment(derive_seed(base, stream, i), &world.env, world.start))
        .collect()
}

/// Maps `f` over `items` on `jobs` threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Minimum success fraction once `yield_window` attempts have been made.
    pub min_yield: f64,
    pub yield_window: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { episodes: 200, seed: 0, min_yield: 0.1, yield_window: 1000 }
    }
}

/// Runs PAC on fresh environments and keeps the successful episodes, in
/// attempt order, until `episodes` of them exist.
pub fn generate_dataset(
    cfg: &DatagenConfig,
    world: &WorldConfig,
    formation: &FormationConfig,
    pac: &PacConfig,
    jobs: usize,
    mut progress: impl FnMut(usize, usize),
) -> Result<Vec<EpisodeRecord>> {
    let controller = Controller::Pac(pac.clone());
    let mut kept = Vec::with_capacity(cfg.episodes);
    let mut attempts = 0usize;
    let chunk = jobs.max(1) * 4;
    while kept.len() < cfg.episodes {
        let idx: Vec<u64> = (attempts as u64..(attempts + chunk) as u64).collect();
        let results = par_map(&idx, jobs, |&i| -> Result<EpisodeRecord> {
            let seed = derive_seed(cfg.seed, STREAM_DATASET, i);
            let env = sample_environment(seed, &world.env, world.start)?;
            run_episode(&controller, &env, world, formation, seed)
        });
        for r in results {
            attempts += 1;
            let r = r?;
            if r.outcome == Outcome::Success && kept.len() < cfg.episodes {
                kept.push(r);
            }
            if attempts >= cfg.yield_window && (kept.len() as f64) < cfg.min_yield * attempts as f64 {
                return Err(Error::Config(format!(
                    "PAC succeeded in only {} of {attempts} attempts; environments are too hard",
                    kept.len()
                )));
            }
        }
        progress(kept.len(), attempts);
    }
    Ok(kept)
}

/// Normalized observation and action window for one anchor step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub obs: Vec<f64>,
    /// `T_p x 2`, row-major.
    pub actions: Vec<f64>,
}

/// One sample per executed step: observation from the states up to the
/// anchor, actions from `t-T_o+1` onward, padded by repetition at both ends.
pub fn window_samples(record: &EpisodeRecord, cfg: &PolicyConfig, norm: &Normalizer) -> Result<Vec<TrainingSample>> {
    let acts = record.executed_actions();
    let n = acts.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let obs = build_observation(&record.states[..=t], &record.env, norm, cfg.obs_steps)?;
        let mut actions = Vec::with_capacity(cfg.horizon * ACTION_DIM);
        let first = t as isize - cfg.obs_steps as isize + 1;
        for j in first..first + cfg.horizon as isize {
            let idx = j.clamp(0, n as isize - 1) as usize;
            actions.extend(norm.normalize_action(&acts[idx]));
        }
        out.push(TrainingSample { obs, actions });
    }
    Ok(out)
}
