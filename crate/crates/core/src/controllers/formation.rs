//! Distance-based tracking law for unicycle followers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, Framework, Vec2};
use crate::world::{
    integrate_midpoint, leaders_from_midpoint, step_unicycle, Action, MidpointState,
    UnicycleState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationGains {
    pub k1: f64,
    pub k2: f64,
    pub beta: f64,
}

impl Default for FormationGains {
    fn default() -> Self {
        Self { k1: 35.0, k2: 30.0, beta: 23.0 }
    }
}

/// `chi_i = sum_j (d_ij^2 - d*_ij^2) (p_i - p_j)` over every edge touching `vertex`.
pub fn chi(vertex: usize, fw: &Framework) -> Result<Vec2> {
    let pi = fw.position(vertex);
    let mut acc = Vec2::zeros();
    let mut any = false;
    for (j, k) in fw.graph.neighbors(vertex) {
        let diff = pi - fw.position(j);
        acc += diff * (diff.norm_squared() - fw.desired_sq[k]);
        any = true;
    }
    if !any {
        return Err(Error::IsolatedVertex(vertex));
    }
    Ok(acc)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Planar cross product `a x b = a_x b_y - a_y b_x`.
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Forward speed and turn rate of follower `vertex`.
///
/// `chi` is the gradient of the squared-distance potential, so the follower
/// moves and turns against it: `u = -h.(k1 chi + beta sign chi)` and
/// `omega = -h x (k2 chi + beta sign chi)`, which is the closed loop
/// `p_dot = -h h^T (...)`, `h_dot = -(I - h h^T)(...)`.
pub fn formation_command(
    vertex: usize,
    fw: &Framework,
    heading: Vec2,
    gains: &FormationGains,
) -> Result<(f64, f64)> {
    if fw.graph.is_leader(vertex) {
        return Err(Error::Config(format!("vertex {vertex} is a leader")));
    }
    let c = chi(vertex, fw)?;
    let s = Vec2::new(sign(c.x), sign(c.y)) * gains.beta;
    let u = -heading.dot(&(c * gains.k1 + s));
    let omega = -cross(heading, c * gains.k2 + s);
    Ok((u, omega))
}

/// Graph, targets and gains for the whole formation, plus follower integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormationConfig {
    pub n_agents: usize,
    pub edges: Vec<(usize, usize)>,
    pub desired_sq: Vec<f64>,
    pub gains: FormationGains,
    /// Initial follower poses `[x, y, heading]`.
    pub followers: Vec<[f64; 3]>,
    /// Follower integration step; the midpoint command is held over a world step.
    pub follower_dt: f64,
}

impl Default for FormationConfig {
    fn default() -> Self {
        let g = DirectedGraph::unit_square();
        Self {
            n_agents: g.vertex_count(),
            edges: g.edges().to_vec(),
            desired_sq: vec![1.0, 2.0, 1.0, 1.0, 1.0],
            gains: FormationGains::default(),
            followers: vec![
                [-0.2, -0.9, std::f64::consts::PI],
                [0.4, -1.0, std::f64::consts::FRAC_PI_2],
            ],
            follower_dt: 1e-3,
        }
    }
}

impl FormationConfig {
    pub fn graph(&self) -> Result<DirectedGraph> {
        DirectedGraph::new(self.n_agents, self.edges.clone(), 2)
    }

    pub fn initial_followers(&self) -> Vec<UnicycleState> {
        self.followers
            .iter()
            .map(|&[x, y, h]| UnicycleState::new(Vec2::new(x, y), h))
            .collect()
    }
}

/// Advances followers while the leaders ride the bar attached to the midpoint.
#[derive(Debug, Clone)]
pub struct FormationTracker {
    graph: DirectedGraph,
    desired_sq: Vec<f64>,
    gains: FormationGains,
    follower_dt: f64,
}

impl FormationTracker {
    pub fn new(cfg: &FormationConfig) -> Result<Self> {
        let graph = cfg.graph()?;
        if cfg.followers.len() != graph.vertex_count() - graph.leader_count() {
            return Err(Error::Config(format!(
                "{} follower poses for {} followers",
                cfg.followers.len(),
                graph.vertex_count() - graph.leader_count()
            )));
        }
        if !(cfg.follower_dt > 0.0) {
            return Err(Error::Config("follower_dt must be positive".into()));
        }
        // validates desired lengths
        Framework::new(graph.clone(), vec![Vec2::zeros(); graph.vertex_count()], cfg.desired_sq.clone())?;
        Ok(Self { graph, desired_sq: cfg.desired_sq.clone(), gains: cfg.gains, follower_dt: cfg.follower_dt })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn framework(&self, leaders: &[Vec2], followers: &[UnicycleState]) -> Framework {
        let positions = leaders.iter().copied().chain(followers.iter().map(|f| f.position)).collect();
        Framework { graph: self.graph.clone(), positions, desired_sq: self.desired_sq.clone() }
    }

    /// Integrates followers over `duration` with fixed leader positions.
    pub fn hold(&self, leaders: &[Vec2], followers: &mut [UnicycleState], duration: f64) -> Result<()> {
        let n = (duration / self.follower_dt).round() as usize;
        for _ in 0..n {
            self.substep(leaders, followers, self.follower_dt)?;
        }
        Ok(())
    }

    /// Integrates followers across one world step of length `dt` during which
    /// the midpoint executes `action` from `start`. Leader positions at each
    /// substep follow the same Euler update evaluated at the elapsed time.
    pub fn advance(
        &self,
        start: &MidpointState,
        action: Action,
        dt: f64,
        bar_length: f64,
        followers: &mut [UnicycleState],
    ) -> Result<()> {
        let n = ((dt / self.follower_dt).round() as usize).max(1);
        let h = dt / n as f64;
        for s in 0..n {
            let mid = integrate_midpoint(start, action, s as f64 * h);
            let leaders = leaders_from_midpoint(&mid, bar_length);
            self.substep(&leaders, followers, h)?;
        }
        Ok(())
    }

    fn substep(&self, leaders: &[Vec2], followers: &mut [UnicycleState], h: f64) -> Result<()> {
        let fw = self.framework(leaders, followers);
        let nl = self.graph.leader_count();
        let commands = followers
            .iter()
            .enumerate()
            .map(|(i, f)| formation_command(nl + 1 + i, &fw, f.heading_vec, &self.gains))
            .collect::<Result<Vec<_>>>()?;
        for (f, (u, w)) in followers.iter_mut().zip(commands) {
            *f = step_unicycle(f, u, w, h);
        }
        Ok(())
    }
}
