//! Planar world: midpoint and follower kinematics, circular obstacles, the
//! goal, and the queries the planners and the episode loop rely on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Vec2;

/// Side length of the obstacle grid.
pub const GRID_SIZE: usize = 7;
/// Clearance reported when the environment has no obstacles.
pub const FREE_SPACE_CLEARANCE: f64 = 1e6;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    #[serde(rename = "c", with = "vec2_serde")]
    pub center: Vec2,
    #[serde(rename = "r")]
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    #[serde(with = "vec2_serde")]
    pub min: Vec2,
    #[serde(with = "vec2_serde")]
    pub max: Vec2,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { min: Vec2::new(x0, y0), max: Vec2::new(x1, y1) }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec2 {
        Vec2::new(
            rng.random_range(self.min.x..=self.max.x),
            rng.random_range(self.min.y..=self.max.y),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    #[serde(with = "vec2_serde")]
    pub goal: Vec2,
    pub obstacles: Vec<Obstacle>,
}

impl Environment {
    pub fn empty(goal: Vec2) -> Self {
        Self { seed: 0, goal, obstacles: Vec::new() }
    }
}

/// Generation ranges for random environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub obstacle_region: Rect,
    pub goal_region: Rect,
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Free disc kept around the start and the goal.
    pub keep_out: f64,
    /// Largest allowed overlap depth between two obstacles, as a fraction of the smaller radius.
    pub max_overlap: f64,
    pub max_rejections: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            obstacle_region: Rect::new(1.5, 1.5, 6.0, 6.0),
            goal_region: Rect::new(2.5, 6.2, 4.5, 6.8),
            min_obstacles: 3,
            max_obstacles: 5,
            min_radius: 0.3,
            max_radius: 0.8,
            keep_out: 0.8,
            max_overlap: 0.5,
            max_rejections: 1000,
        }
    }
}

/// Kinematic limits and episode constants shared by every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub bar_length: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    #[serde(with = "vec2_serde")]
    pub start: Vec2,
    pub start_heading: f64,
    pub env: EnvConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_min: 0.0,
            v_max: 0.8,
            omega_max: 1.5,
            bar_length: 1.0,
            success_radius: 0.3,
            max_steps: 600,
            start: Vec2::zeros(),
            start_heading: PI / 2.0,
            env: EnvConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn clamp(&self, action: Action) -> Action {
        Action {
            v: action.v.clamp(self.v_min, self.v_max),
            omega: action.omega.clamp(-self.omega_max, self.omega_max),
        }
    }

    pub fn start_state(&self) -> MidpointState {
        MidpointState::at_rest(self.start, self.start_heading)
    }
}

/// Midpoint velocity command `(v, omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub omega: f64,
}

impl Action {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn norm(&self) -> f64 {
        self.v.hypot(self.omega)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.v, self.omega]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidpointState {
    pub position: Vec2,
    pub heading: f64,
    pub lin_vel: f64,
    pub ang_vel: f64,
}

impl MidpointState {
    pub fn at_rest(position: Vec2, heading: f64) -> Self {
        Self { position, heading: wrap_angle(heading), lin_vel: 0.0, ang_vel: 0.0 }
    }

    /// `[x, y, phi, x_dot, y_dot, omega]`.
    pub fn to_vector(&self) -> [f64; 6] {
        [
            self.position.x,
            self.position.y,
            self.heading,
            self.lin_vel * self.heading.cos(),
            self.lin_vel * self.heading.sin(),
            self.ang_vel,
        ]
    }

    /// Inverse of [`MidpointState::to_vector`]; the speed is recovered by
    /// projecting the planar velocity on the heading.
    pub fn from_vector(s: &[f64; 6]) -> Self {
        Self {
            position: Vec2::new(s[0], s[1]),
            heading: wrap_angle(s[2]),
            lin_vel: s[3] * s[2].cos() + s[4] * s[2].sin(),
            ang_vel: s[5],
        }
    }

    pub fn heading_vec(&self) -> Vec2 {
        Vec2::new(self.heading.cos(), self.heading.sin())
    }
}

/// One explicit-Euler step of the midpoint. The action is clamped to the
/// world limits before it is applied and stored.
pub fn step_midpoint(
    state: &MidpointState,
    action: Action,
    dt: f64,
    limits: &WorldConfig,
) -> Result<MidpointState> {
    if !action.v.is_finite() || !action.omega.is_finite() {
        return Err(Error::InvalidAction(format!("({}, {})", action.v, action.omega)));
    }
    Ok(integrate_midpoint(state, limits.clamp(action), dt))
}

/// Euler update without clamping or validation; `action` must already be admissible.
pub(crate) fn integrate_midpoint(state: &MidpointState, action: Action, dt: f64) -> MidpointState {
    let (s, c) = state.heading.sin_cos();
    MidpointState {
        position: state.position + Vec2::new(action.v * c, action.v * s) * dt,
        heading: wrap_angle(state.heading + action.omega * dt),
        lin_vel: action.v,
        ang_vel: action.omega,
    }
}

/// Endpoints of the leader bar. The first leader sits on the left of the heading.
pub fn leaders_from_midpoint(state: &MidpointState, bar_length: f64) -> [Vec2; 2] {
    let (s, c) = state.heading.sin_cos();
    let half = Vec2::new(s, -c) * (bar_length / 2.0);
    [state.position - half, state.position + half]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleState {
    pub position: Vec2,
    pub heading_vec: Vec2,
}

impl UnicycleState {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading_vec: Vec2::new(heading.cos(), heading.sin()) }
    }
}

pub fn step_unicycle(state: &UnicycleState, u: f64, omega: f64, dt: f64) -> UnicycleState {
    let h = state.heading_vec;
    let perp = Vec2::new(-h.y, h.x);
    let turned = h + perp * (omega * dt);
    UnicycleState { position: state.position + h * (u * dt), heading_vec: turned.normalize() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationState {
    pub midpoint: MidpointState,
    pub leaders: [Vec2; 2],
    pub followers: Vec<UnicycleState>,
    pub time_step: usize,
}

impl FormationState {
    /// Every point checked for collisions: midpoint, both leaders, then followers.
    pub fn checked_points(&self) -> impl Iterator<Item = Vec2> + '_ {
        std::iter::once(self.midpoint.position)
            .chain(self.leaders.iter().copied())
            .chain(self.followers.iter().map(|f| f.position))
    }

    pub fn min_clearance(&self, env: &Environment) -> f64 {
        self.checked_points().map(|p| clearance(p, env)).fold(f64::INFINITY, f64::min)
    }
}

/// Row-major 7x7 grid holding, per cell, the largest radius of the obstacles
/// whose center floors to that cell after the `(1, 1)` shift.
pub fn encode_obstacle_grid(env: &Environment) -> [f64; GRID_SIZE * GRID_SIZE] {
    let mut grid = [0.0f64; GRID_SIZE * GRID_SIZE];
    let cell = |v: f64| (v.floor() - 1.0).clamp(0.0, (GRID_SIZE - 1) as f64) as usize;
    for ob in &env.obstacles {
        let idx = cell(ob.center.x) * GRID_SIZE + cell(ob.center.y);
        grid[idx] = grid[idx].max(ob.radius);
    }
    grid
}

/// Signed distance to the nearest obstacle surface; negative inside an obstacle.
pub fn clearance(point: Vec2, env: &Environment) -> f64 {
    env.obstacles
        .iter()
        .map(|o| (point - o.center).norm() - o.radius)
        .fold(FREE_SPACE_CLEARANCE, f64::min)
}

/// Draws a random environment; the same `seed` always yields the same layout.
pub fn sample_environment(seed: u64, cfg: &EnvConfig, start: Vec2) -> Result<Environment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = cfg.goal_region.sample(&mut rng);
    let count = rng.random_range(cfg.min_obstacles..=cfg.max_obstacles);
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(count);
    let mut rejections = 0;
    while obstacles.len() < count {
        let center = cfg.obstacle_region.sample(&mut rng);
        let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let keeps_out = |p: Vec2| (center - p).norm() - radius > cfg.keep_out;
        let overlap_ok = obstacles.iter().all(|o| {
            let depth = o.radius + radius - (o.center - center).norm();
            depth <= cfg.max_overlap * o.radius.min(radius)
        });
        if keeps_out(start) && keeps_out(goal) && overlap_ok {
            obstacles.push(Obstacle { center, radius });
        } else {
            rejections += 1;
            if rejections > cfg.max_rejections {
                return Err(Error::EnvironmentGeneration(rejections));
            }
        }
    }
    Ok(Environment { seed, goal, obstacles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Running,
    Success,
    Collision,
    Timeout,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        }
    }
}

/// Collision takes priority over success, which takes priority over timeout.
pub fn check_termination(fs: &FormationState, env: &Environment, cfg: &WorldConfig) -> Outcome {
    if fs.min_clearance(env) < 0.0 {
        Outcome::Collision
    } else if (fs.midpoint.position - env.goal).norm() < cfg.success_radius {
        Outcome::Success
    } else if fs.time_step >= cfg.max_steps {
        Outcome::Timeout
    } else {
        Outcome::Running
    }
}

pub(crate) mod vec2_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::graph::Vec2;

    pub fn serialize<S: Serializer>(v: &Vec2, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec2, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Vec2::new(x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_with(obstacles: Vec<(f64, f64, f64)>) -> Environment {
        Environment {
            seed: 0,
            goal: Vec2::new(3.0, 6.5),
            obstacles: obstacles
                .into_iter()
                .map(|(x, y, r)| Obstacle { center: Vec2::new(x, y), radius: r })
                .collect(),
        }
    }

    #[test]
    fn midpoint_step_examples() {
        let cfg = WorldConfig::default();
        let s = MidpointState::at_rest(Vec2::zeros(), PI / 2.0);
        let n = step_midpoint(&s, Action::new(0.3, 0.1), 0.1, &cfg).unwrap();
        assert!(n.position.x.abs() < 1e-12);
        assert!((n.position.y - 0.03).abs() < 1e-12);
        assert!((n.heading - (PI / 2.0 + 0.01)).abs() < 1e-12);
        assert_eq!((n.lin_vel, n.ang_vel), (0.3, 0.1));

        let s = MidpointState::at_rest(Vec2::zeros(), 0.0);
        let n = step_midpoint(&s, Action::new(1.0, 0.0), 0.1, &WorldConfig { v_max: 1.0, ..cfg.clone() })
            .unwrap();
        assert!((n.position - Vec2::new(0.1, 0.0)).norm() < 1e-12);

        let s = MidpointState::at_rest(Vec2::new(1.0, 2.0), 0.7);
        let n = step_midpoint(&s, Action::default(), 0.1, &cfg).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.heading, s.heading);
    }

    #[test]
    fn midpoint_rejects_non_finite_and_clamps() {
        let cfg = WorldConfig::default();
        let s = MidpointState::at_rest(Vec2::zeros(), 0.0);
        assert!(step_midpoint(&s, Action::new(f64::NAN, 0.0), 0.1, &cfg).is_err());
        assert!(step_midpoint(&s, Action::new(0.0, f64::INFINITY), 0.1, &cfg).is_err());
        let n = step_midpoint(&s, Action::new(5.0, -9.0), 0.1, &cfg).unwrap();
        assert_eq!((n.lin_vel, n.ang_vel), (cfg.v_max, -cfg.omega_max));
    }

    #[test]
    fn heading_wraps_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        let s = MidpointState::at_rest(Vec2::zeros(), PI - 0.01);
        let n = integrate_midpoint(&s, Action::new(0.0, 1.0), 0.1);
        assert!(n.heading > -PI && n.heading <= PI);
        assert!((n.heading - (-PI + 0.09)).abs() < 1e-12);
    }

    #[test]
    fn leaders_at_start_pose() {
        let s = MidpointState::at_rest(Vec2::zeros(), PI / 2.0);
        let [a, b] = leaders_from_midpoint(&s, 1.0);
        assert!((a - Vec2::new(-0.5, 0.0)).norm() < 1e-12);
        assert!((b - Vec2::new(0.5, 0.0)).norm() < 1e-12);

        let s = MidpointState::at_rest(Vec2::zeros(), 0.0);
        let [a, b] = leaders_from_midpoint(&s, 1.0);
        assert!((a - Vec2::new(0.0, 0.5)).norm() < 1e-12);
        assert!((b - Vec2::new(0.0, -0.5)).norm() < 1e-12);
    }

    #[test]
    fn state_vector_layout() {
        let s = MidpointState { position: Vec2::new(1.0, 2.0), heading: PI / 2.0, lin_vel: 0.4, ang_vel: -0.2 };
        let v = s.to_vector();
        assert_eq!(&v[..3], &[1.0, 2.0, PI / 2.0]);
        assert!(v[3].abs() < 1e-12 && (v[4] - 0.4).abs() < 1e-12 && v[5] == -0.2);
        let back = MidpointState::from_vector(&v);
        assert!((back.lin_vel - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unicycle_straight_and_turning() {
        let s = UnicycleState::new(Vec2::zeros(), 0.0);
        let n = step_unicycle(&s, 1.0, 0.0, 0.1);
        assert!((n.position - Vec2::new(0.1, 0.0)).norm() < 1e-12);
        assert_eq!(n.heading_vec, s.heading_vec);

        // a quarter turn over 0.1 s, integrated finely
        let mut s = UnicycleState::new(Vec2::zeros(), 0.0);
        let dt = 1e-4;
        for _ in 0..1000 {
            s = step_unicycle(&s, 0.0, PI / 2.0 * 10.0, dt);
            assert!((s.heading_vec.norm() - 1.0).abs() < 1e-9);
        }
        assert!((s.heading_vec - Vec2::new(0.0, 1.0)).norm() < 1e-3);
    }

    #[test]
    fn grid_examples() {
        let g = encode_obstacle_grid(&env_with(vec![(2.3, 4.7, 0.5)]));
        assert_eq!(g[GRID_SIZE + 3], 0.5);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 1);

        assert!(encode_obstacle_grid(&env_with(vec![])).iter().all(|&v| v == 0.0));

        let g = encode_obstacle_grid(&env_with(vec![(2.1, 2.1, 0.3), (2.9, 2.9, 0.6)]));
        assert_eq!(g[GRID_SIZE + 1], 0.6);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 1);

        // out-of-range centers clip into the grid
        let g = encode_obstacle_grid(&env_with(vec![(0.2, 9.5, 0.4)]));
        assert_eq!(g[6], 0.4);
    }

    #[test]
    fn clearance_examples() {
        let e = env_with(vec![(0.0, 2.0, 0.5)]);
        assert!((clearance(Vec2::zeros(), &e) - 1.5).abs() < 1e-12);
        assert!(clearance(Vec2::new(0.0, 1.5), &e).abs() < 1e-12);
        let e = env_with(vec![(1.0, 3.0, 0.5), (4.0, 1.0, 0.8)]);
        assert!((clearance(Vec2::new(1.0, 1.0), &e) - 1.5).abs() < 1e-12);
        assert_eq!(clearance(Vec2::zeros(), &env_with(vec![])), FREE_SPACE_CLEARANCE);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let cfg = EnvConfig::default();
        let a = sample_environment(42, &cfg, Vec2::zeros()).unwrap();
        let b = sample_environment(42, &cfg, Vec2::zeros()).unwrap();
        assert_eq!(a, b);
        for seed in 0..1000 {
            let e = sample_environment(seed, &cfg, Vec2::zeros()).unwrap();
            assert!((3..=5).contains(&e.obstacles.len()));
            for o in &e.obstacles {
                assert!((0.3..=0.8).contains(&o.radius));
            }
            assert!(clearance(Vec2::zeros(), &e) > 0.8);
            assert!(clearance(e.goal, &e) > 0.8);
        }
    }

    #[test]
    fn impossible_config_reports_generation_error() {
        let cfg = EnvConfig { keep_out: 50.0, ..EnvConfig::default() };
        assert!(matches!(
            sample_environment(1, &cfg, Vec2::zeros()),
            Err(Error::EnvironmentGeneration(_))
        ));
    }

    fn formation_at(mid: Vec2, follower: Vec2, step: usize) -> FormationState {
        let m = MidpointState::at_rest(mid, PI / 2.0);
        FormationState {
            midpoint: m,
            leaders: leaders_from_midpoint(&m, 1.0),
            followers: vec![UnicycleState::new(follower, 0.0)],
            time_step: step,
        }
    }

    #[test]
    fn termination_priorities() {
        let cfg = WorldConfig::default();
        let e = env_with(vec![(3.0, 5.0, 0.5)]);
        let fs = formation_at(e.goal, Vec2::new(3.0, 5.2), 10);
        assert_eq!(check_termination(&fs, &e, &cfg), Outcome::Collision);
        let fs = formation_at(e.goal, Vec2::new(3.0, 5.6), 10);
        assert_eq!(check_termination(&fs, &e, &cfg), Outcome::Success);
        let fs = formation_at(Vec2::zeros(), Vec2::new(0.0, -1.0), 600);
        assert_eq!(check_termination(&fs, &e, &cfg), Outcome::Timeout);
        let fs = formation_at(Vec2::zeros(), Vec2::new(0.0, -1.0), 599);
        assert_eq!(check_termination(&fs, &e, &cfg), Outcome::Running);
    }

    #[test]
    fn environment_json_shape() {
        let e = env_with(vec![(2.0, 3.0, 0.5)]);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["goal"], serde_json::json!([3.0, 6.5]));
        assert_eq!(v["obstacles"][0]["c"], serde_json::json!([2.0, 3.0]));
        assert_eq!(v["obstacles"][0]["r"], serde_json::json!(0.5));
        let back: Environment = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}
