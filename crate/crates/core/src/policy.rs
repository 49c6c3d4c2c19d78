//! Observation building, receding-horizon diffusion sampling and the episode
//! loop shared by the diffusion policy and the two baselines.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controllers::{pac_command, FormationConfig, FormationTracker, Mppi, MppiConfig, PacConfig};
use crate::data::EpisodeRecord;
use crate::ddpm::{denoise_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{ConditionalUnet1d, Feat, ParameterStore, Rows};
use crate::world::{
    check_termination, encode_obstacle_grid, leaders_from_midpoint, step_midpoint, Action, Environment,
    FormationState, MidpointState, Outcome, WorldConfig, GRID_SIZE,
};

pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
pub const GRID_SCALE: f64 = 0.8;
pub const GOAL_SCALE: f64 = 7.0;
pub const OBS_CLAMP: f64 = 1.5;
const MIN_RANGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub obs_steps: usize,
    pub action_steps: usize,
    pub diffusion_steps: usize,
    pub adaptive_candidates: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { horizon: 64, obs_steps: 2, action_steps: 10, diffusion_steps: 100, adaptive_candidates: 1 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_steps == 0 || self.action_steps == 0 || self.action_steps + self.obs_steps > self.horizon + 1 {
            return Err(Error::Config(format!(
                "need 1 <= T_a <= T_p - T_o + 1, got T_p={} T_o={} T_a={}",
                self.horizon, self.obs_steps, self.action_steps
            )));
        }
        if self.adaptive_candidates == 0 {
            return Err(Error::Config("adaptive_candidates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_steps * STATE_DIM + GRID_SIZE * GRID_SIZE + 2
    }
}

/// Per-dimension min/max scaling of states and actions to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_min: [f64; STATE_DIM],
    pub state_max: [f64; STATE_DIM],
    pub action_min: [f64; ACTION_DIM],
    pub action_max: [f64; ACTION_DIM],
}

fn range_of<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> Option<([f64; N], [f64; N])> {
    let mut lo = [f64::INFINITY; N];
    let mut hi = [f64::NEG_INFINITY; N];
    let mut any = false;
    for r in rows {
        any = true;
        for i in 0..N {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    any.then(|| {
        for i in 0..N {
            if hi[i] - lo[i] < MIN_RANGE {
                hi[i] = lo[i] + MIN_RANGE;
            }
        }
        (lo, hi)
    })
}

fn scale<const N: usize>(x: &[f64; N], lo: &[f64; N], hi: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| 2.0 * (x[i] - lo[i]) / (hi[i] - lo[i]) - 1.0)
}

fn unscale<const N: usize>(x: &[f64; N], lo: &[f64; N], hi: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| (x[i] + 1.0) / 2.0 * (hi[i] - lo[i]) + lo[i])
}

impl Normalizer {
    pub fn fit(
        states: impl Iterator<Item = [f64; STATE_DIM]>,
        actions: impl Iterator<Item = [f64; ACTION_DIM]>,
    ) -> Result<Self> {
        let (state_min, state_max) = range_of(states).ok_or(Error::Empty("dataset states"))?;
        let (action_min, action_max) = range_of(actions).ok_or(Error::Empty("dataset actions"))?;
        Ok(Self { state_min, state_max, action_min, action_max })
    }

    /// Fits over every recorded state and executed action.
    pub fn from_records(records: &[EpisodeRecord]) -> Result<Self> {
        Self::fit(
            records.iter().flat_map(|r| r.states.iter().copied()),
            records.iter().flat_map(|r| r.executed_actions().iter().copied()),
        )
    }

    pub fn normalize_state(&self, s: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        scale(s, &self.state_min, &self.state_max)
    }

    pub fn denormalize_state(&self, s: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        unscale(s, &self.state_min, &self.state_max)
    }

    pub fn normalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        scale(a, &self.action_min, &self.action_max)
    }

    pub fn denormalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        unscale(a, &self.action_min, &self.action_max)
    }
}

/// `[state_{t-T_o+1} .. state_t, grid, goal]`, with the earliest state
/// repeated when fewer than `T_o` states exist.
pub fn build_observation(
    history: &[[f64; STATE_DIM]],
    env: &Environment,
    norm: &Normalizer,
    obs_steps: usize,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Empty("observation history"));
    }
    let mut obs = Vec::with_capacity(obs_steps * STATE_DIM + GRID_SIZE * GRID_SIZE + 2);
    let start = history.len() as isize - obs_steps as isize;
    for i in start..history.len() as isize {
        let s = &history[i.max(0) as usize];
        obs.extend(norm.normalize_state(s));
    }
    obs.extend(encode_obstacle_grid(env).iter().map(|r| r / GRID_SCALE));
    obs.push(env.goal.x / GOAL_SCALE);
    obs.push(env.goal.y / GOAL_SCALE);
    obs.iter_mut().for_each(|v| *v = v.clamp(-OBS_CLAMP, OBS_CLAMP));
    Ok(obs)
}

/// Rows `T_o-1 .. T_o-1+T_a` of a plan.
pub fn extract_executable(plan: &[Action], cfg: &PolicyConfig) -> Result<Vec<Action>> {
    let lo = cfg.obs_steps.checked_sub(1).ok_or_else(|| Error::Config("T_o must be at least 1".into()))?;
    let hi = lo + cfg.action_steps;
    if cfg.action_steps == 0 || hi > plan.len() {
        return Err(Error::Config(format!("rows {lo}..{hi} outside a plan of {} steps", plan.len())));
    }
    Ok(plan[lo..hi].to_vec())
}

/// Minimum clearance of the midpoint and both leaders while executing `actions`.
pub fn rollout_clearance(actions: &[Action], state: &MidpointState, env: &Environment, world: &WorldConfig) -> Result<f64> {
    let mut s = *state;
    let mut score = f64::INFINITY;
    for &a in actions {
        s = step_midpoint(&s, a, world.dt, world)?;
        let [l1, l2] = leaders_from_midpoint(&s, world.bar_length);
        for p in [s.position, l1, l2] {
            score = score.min(crate::world::clearance(p, env));
        }
    }
    Ok(score)
}

/// Index of the candidate whose executable window keeps the largest clearance;
/// ties go to the lower index.
pub fn adaptive_select(
    candidates: &[Vec<Action>],
    state: &MidpointState,
    env: &Environment,
    world: &WorldConfig,
    cfg: &PolicyConfig,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate plans"));
    }
    if candidates.len() == 1 {
        return Ok(0);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let score = rollout_clearance(&extract_executable(c, cfg)?, state, env, world)?;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// A frozen noise-prediction network with everything needed to sample plans.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub net: ConditionalUnet1d,
    pub params: ParameterStore<f32>,
    pub normalizer: Normalizer,
    pub policy: PolicyConfig,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(
        net: ConditionalUnet1d,
        params: ParameterStore<f32>,
        normalizer: Normalizer,
        policy: PolicyConfig,
    ) -> Result<Self> {
        policy.validate()?;
        if net.config().cond_dim != policy.obs_dim() {
            return Err(Error::Config(format!(
                "network conditions on {} values but observations have {}",
                net.config().cond_dim,
                policy.obs_dim()
            )));
        }
        if net.config().input_channels != ACTION_DIM || !net.config().accepts_horizon(policy.horizon) {
            return Err(Error::Config("network shape does not match the policy horizon".into()));
        }
        let schedule = NoiseSchedule::cosine(policy.diffusion_steps)?;
        Ok(Self { net, params, normalizer, policy, schedule })
    }

    /// Reverse-diffuses `count` plans for one observation; the returned plans
    /// are denormalized and `T_p` steps long.
    pub fn sample_plans<G: Rng + ?Sized>(&self, obs: &[f64], count: usize, rng: &mut G) -> Result<Vec<Vec<Action>>> {
        let (t, c) = (self.policy.horizon, ACTION_DIM);
        let n = count * t * c;
        let mut x = Feat { c, b: count, t, data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect() };
        let obs_rows = Rows {
            b: count,
            f: obs.len(),
            data: (0..count).flat_map(|_| obs.iter().map(|&v| v as f32)).collect(),
        };
        for k in (0..self.schedule.steps()).rev() {
            let eps = self.net.forward(&self.params, &x, &vec![k; count], &obs_rows)?;
            let z: Vec<f32> = if k > 0 {
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
            } else {
                vec![0.0; n]
            };
            x.data = denoise_step(&x.data, &eps.data, k, &self.schedule, &z)?;
            if x.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample(k));
            }
        }
        let seqs = crate::nn::unet::feat_to_sequences(&x);
        Ok(seqs
            .chunks(t * c)
            .map(|plan| {
                plan.chunks(c)
                    .map(|a| {
                        let [v, w] = self.normalizer.denormalize_action(&[a[0] as f64, a[1] as f64]);
                        Action::new(v, w)
                    })
                    .collect()
            })
            .collect())
    }

    pub fn sample_plan<G: Rng + ?Sized>(&self, obs: &[f64], rng: &mut G) -> Result<Vec<Action>> {
        Ok(self.sample_plans(obs, 1, rng)?.remove(0))
    }
}

#[derive(Debug, Clone)]
pub enum Controller<'a> {
    Diffusion { model: &'a DiffusionModel, candidates: usize },
    Pac(PacConfig),
    Mppi(MppiConfig),
}

impl Controller<'_> {
    pub fn name(&self) -> String {
        match self {
            Controller::Diffusion { candidates: 1, .. } => "diffusion".into(),
            Controller::Diffusion { candidates, .. } => format!("diffusion-adaptive{candidates}"),
            Controller::Pac(_) => "pac".into(),
            Controller::Mppi(_) => "mppi".into(),
        }
    }
}

/// Formation bookkeeping for one episode: midpoint, leaders and followers.
struct Rollout<'a> {
    env: &'a Environment,
    world: &'a WorldConfig,
    tracker: FormationTracker,
    state: FormationState,
    record: EpisodeRecord,
}

impl<'a> Rollout<'a> {
    fn new(env: &'a Environment, world: &'a WorldConfig, formation: &FormationConfig, name: String, seed: u64) -> Result<Self> {
        let tracker = FormationTracker::new(formation)?;
        let mid = world.start_state();
        let state = FormationState {
            midpoint: mid,
            leaders: leaders_from_midpoint(&mid, world.bar_length),
            followers: formation.initial_followers(),
            time_step: 0,
        };
        let record = EpisodeRecord::new(env.clone(), name, seed);
        Ok(Self { env, world, tracker, state, record })
    }

    fn status(&self) -> Outcome {
        check_termination(&self.state, self.env, self.world)
    }

    fn log_state(&mut self) {
        let s = &self.state;
        self.record.states.push(s.midpoint.to_vector());
        self.record.leaders.push(s.leaders.map(|p| [p.x, p.y]));
        self.record.followers.push(s.followers.iter().map(|f| [f.position.x, f.position.y]).collect());
        self.record.clearance.push(s.min_clearance(self.env));
    }

    fn apply(&mut self, action: Action) -> Result<Outcome> {
        let start = self.state.midpoint;
        let next = step_midpoint(&start, action, self.world.dt, self.world)?;
        let applied = self.world.clamp(action);
        self.tracker
            .advance(&start, applied, self.world.dt, self.world.bar_length, &mut self.state.followers)?;
        self.state.midpoint = next;
        self.state.leaders = leaders_from_midpoint(&next, self.world.bar_length);
        self.state.time_step += 1;
        self.record.actions.push(applied.to_array());
        self.log_state();
        Ok(self.status())
    }

    fn finish(mut self, outcome: Outcome) -> EpisodeRecord {
        let last = self.record.actions.last().copied().unwrap_or([0.0, 0.0]);
        self.record.actions.push(last);
        self.record.outcome = outcome;
        self.record
    }
}

/// Runs one closed-loop episode until success, collision or timeout.
pub fn run_episode(
    controller: &Controller<'_>,
    env: &Environment,
    world: &WorldConfig,
    formation: &FormationConfig,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut ro = Rollout::new(env, world, formation, controller.name(), seed)?;
    ro.log_state();
    let mut outcome = ro.status();
    match controller {
        Controller::Pac(cfg) => {
            while outcome == Outcome::Running {
                let a = pac_command(&ro.state.midpoint, env, cfg);
                outcome = ro.apply(a)?;
            }
        }
        Controller::Mppi(cfg) => {
            let mut mppi = Mppi::new(cfg.clone(), seed);
            while outcome == Outcome::Running {
                let a = mppi.command(&ro.state.midpoint, env, world);
                outcome = ro.apply(a)?;
            }
        }
        Controller::Diffusion { model, candidates } => {
            let cfg = &model.policy;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut history: VecDeque<[f64; STATE_DIM]> = VecDeque::with_capacity(cfg.obs_steps);
            history.push_back(ro.state.midpoint.to_vector());
            while outcome == Outcome::Running {
                let hist: Vec<_> = history.iter().copied().collect();
                let obs = build_observation(&hist, env, &model.normalizer, cfg.obs_steps)?;
                let plans = model.sample_plans(&obs, (*candidates).max(1), &mut rng)?;
                let pick = adaptive_select(&plans, &ro.state.midpoint, env, world, cfg)?;
                for a in extract_executable(&plans[pick], cfg)? {
                    outcome = ro.apply(a)?;
                    if history.len() == cfg.obs_steps {
                        history.pop_front();
                    }
                    history.push_back(ro.state.midpoint.to_vector());
                    if outcome != Outcome::Running {
                        break;
                    }
                }
            }
        }
    }
    Ok(ro.finish(outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vec2;
    use crate::world::Obstacle;

    fn norm() -> Normalizer {
        Normalizer {
            state_min: [-1.0, -1.0, -4.0, -1.0, -1.0, -2.0],
            state_max: [7.0, 7.0, 4.0, 1.0, 1.0, 2.0],
            action_min: [0.0, -1.5],
            action_max: [0.5, 1.5],
        }
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit(
            [[0.0; 6], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]].into_iter(),
            [[0.0, -1.0], [0.5, 1.0]].into_iter(),
        )
        .unwrap();
        assert!(n.normalize_action(&[0.25, 0.0])[0].abs() < 1e-15);
        let s = [0.3, 1.7, 2.2, 0.1, 4.9, 5.5];
        let back = n.denormalize_state(&n.normalize_state(&s));
        assert!(s.iter().zip(back).all(|(a, b)| (a - b).abs() < 1e-9));
        let c = Normalizer::fit([[1.0; 6], [1.0; 6]].into_iter(), [[0.2, 0.2]].into_iter()).unwrap();
        assert!(c.normalize_state(&[1.0; 6]).iter().all(|v| v.is_finite()));
        assert!(Normalizer::fit(std::iter::empty(), std::iter::empty()).is_err());
    }

    #[test]
    fn observation_layout() {
        let env = Environment::empty(Vec2::new(3.5, 6.5));
        let s = MidpointState::at_rest(Vec2::zeros(), 1.0).to_vector();
        let obs = build_observation(&[s], &env, &norm(), 2).unwrap();
        assert_eq!(obs.len(), 63);
        assert_eq!(obs[..6], obs[6..12]);
        assert!(obs[12..61].iter().all(|&v| v == 0.0));
        assert!((obs[61] - 0.5).abs() < 1e-12);
        assert!(obs.iter().all(|v| v.abs() <= OBS_CLAMP));

        let s2 = MidpointState::at_rest(Vec2::new(1.0, 1.0), 1.0).to_vector();
        let obs = build_observation(&[s, s2, s], &env, &norm(), 2).unwrap();
        assert_eq!(obs[..6], norm().normalize_state(&s2));
    }

    #[test]
    fn extraction_rows() {
        let plan: Vec<Action> = (0..64).map(|i| Action::new(i as f64, 0.0)).collect();
        let cfg = PolicyConfig::default();
        let ex = extract_executable(&plan, &cfg).unwrap();
        assert_eq!(ex.len(), 10);
        assert_eq!(ex[0].v, 1.0);
        assert_eq!(ex[9].v, 10.0);
        let one = PolicyConfig { action_steps: 1, ..cfg };
        assert_eq!(extract_executable(&plan, &one).unwrap(), vec![Action::new(1.0, 0.0)]);
        assert!(extract_executable(&plan[..5], &cfg).is_err());
        assert!(PolicyConfig { action_steps: 64, ..cfg }.validate().is_err());
        assert!(PolicyConfig { action_steps: 63, ..cfg }.validate().is_ok());
    }

    #[test]
    fn adaptive_prefers_clear_candidate() {
        let world = WorldConfig::default();
        let env = Environment {
            seed: 0,
            goal: Vec2::new(3.0, 6.5),
            obstacles: vec![Obstacle { center: Vec2::new(0.0, 0.8), radius: 0.3 }],
        };
        let start = world.start_state();
        let straight = vec![Action::new(0.8, 0.0); 64];
        let turn = vec![Action::new(0.3, -1.5); 64];
        let cfg = PolicyConfig::default();
        assert_eq!(adaptive_select(&[straight.clone()], &start, &env, &world, &cfg).unwrap(), 0);
        assert_eq!(adaptive_select(&[straight.clone(), turn.clone()], &start, &env, &world, &cfg).unwrap(), 1);
        assert_eq!(adaptive_select(&[turn.clone(), turn.clone()], &start, &env, &world, &cfg).unwrap(), 0);
        let mut tail = turn.clone();
        tail[11..].iter_mut().for_each(|a| *a = Action::new(0.0, 1.5));
        let a = rollout_clearance(&extract_executable(&turn, &cfg).unwrap(), &start, &env, &world).unwrap();
        let b = rollout_clearance(&extract_executable(&tail, &cfg).unwrap(), &start, &env, &world).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pac_free_space_and_zero_budget() {
        let world = WorldConfig::default();
        let formation = FormationConfig::default();
        let env = Environment::empty(Vec2::new(3.5, 6.5));
        let rec = run_episode(&Controller::Pac(PacConfig::default()), &env, &world, &formation, 1).unwrap();
        assert_eq!(rec.outcome, Outcome::Success);
        assert_eq!(rec.states.len(), rec.actions.len());
        let zero = WorldConfig { max_steps: 0, ..world };
        let rec = run_episode(&Controller::Pac(PacConfig::default()), &env, &zero, &formation, 1).unwrap();
        assert_eq!(rec.outcome, Outcome::Timeout);
        assert_eq!(rec.states.len(), 1);
    }
}
