//! Model predictive path integral baseline over the midpoint model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::world::{
    clearance, integrate_midpoint, leaders_from_midpoint, Action, Environment, MidpointState,
    WorldConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub horizon: usize,
    pub num_samples: usize,
    pub temperature: f64,
    pub noise_std: [f64; 2],
    pub w_goal: f64,
    pub w_collision: f64,
    pub w_control: f64,
    /// Clearance below which the collision term is active.
    pub safety_margin: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            num_samples: 256,
            temperature: 1.0,
            noise_std: [0.3, 0.5],
            w_goal: 10.0,
            w_collision: 100.0,
            w_control: 0.1,
            safety_margin: 0.15,
        }
    }
}

/// Sampling controller with a warm-started nominal sequence owned by one rollout.
#[derive(Debug, Clone)]
pub struct Mppi {
    cfg: MppiConfig,
    nominal: Vec<Action>,
    rng: ChaCha8Rng,
}

impl Mppi {
    pub fn new(cfg: MppiConfig, seed: u64) -> Self {
        let nominal = vec![Action::default(); cfg.horizon.max(1)];
        Self { cfg, nominal, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn nominal(&self) -> &[Action] {
        &self.nominal
    }

    pub fn set_nominal(&mut self, seq: Vec<Action>) {
        assert_eq!(seq.len(), self.nominal.len());
        self.nominal = seq;
    }

    fn rollout_cost(
        &self,
        state: &MidpointState,
        seq: &[Action],
        env: &Environment,
        world: &WorldConfig,
    ) -> f64 {
        let mut s = *state;
        let mut cost = 0.0;
        for a in seq {
            s = integrate_midpoint(&s, *a, world.dt);
            let [l1, l2] = leaders_from_midpoint(&s, world.bar_length);
            let c = clearance(s.position, env).min(clearance(l1, env)).min(clearance(l2, env));
            if c < self.cfg.safety_margin {
                cost += self.cfg.w_collision * (self.cfg.safety_margin - c);
            }
            cost += self.cfg.w_control * (a.v * a.v + a.omega * a.omega);
        }
        cost + self.cfg.w_goal * (s.position - env.goal).norm()
    }

    /// One control step: returns the first action of the re-weighted sequence
    /// and shifts the nominal sequence for the next call.
    pub fn command(&mut self, state: &MidpointState, env: &Environment, world: &WorldConfig) -> Action {
        let h = self.nominal.len();
        let n = self.cfg.num_samples.max(1);
        let [sv, sw] = self.cfg.noise_std;
        let nv = Normal::new(0.0, sv.max(0.0)).expect("finite std");
        let nw = Normal::new(0.0, sw.max(0.0)).expect("finite std");

        let mut samples = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        for _ in 0..n {
            let seq: Vec<Action> = self
                .nominal
                .iter()
                .map(|a| {
                    world.clamp(Action::new(a.v + nv.sample(&mut self.rng), a.omega + nw.sample(&mut self.rng)))
                })
                .collect();
            costs.push(self.rollout_cost(state, &seq, env, world));
            samples.push(seq);
        }

        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> =
            costs.iter().map(|c| (-(c - best) / self.cfg.temperature).exp()).collect();
        let total: f64 = weights.iter().sum();

        let mut next = vec![Action::default(); h];
        for (seq, w) in samples.iter().zip(&weights) {
            for (acc, a) in next.iter_mut().zip(seq) {
                acc.v += w * a.v / total;
                acc.omega += w * a.omega / total;
            }
        }
        let first = world.clamp(next[0]);
        next.rotate_left(1);
        next[h - 1] = next[h.saturating_sub(2)];
        self.nominal = next;
        first
    }
}
