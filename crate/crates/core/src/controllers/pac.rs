//! Path-aware potential-field controller used to collect demonstrations.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::graph::Vec2;
use crate::world::{wrap_angle, Action, Environment, MidpointState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacConfig {
    pub attract_gain: f64,
    pub repulse_gain: f64,
    /// Surface distance below which an obstacle repels.
    pub influence_radius: f64,
    pub lateral_gain: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub goal_tolerance: f64,
    /// Inflation of every obstacle, covering the extent of the formation around the midpoint.
    pub body_margin: f64,
    /// Extra inflation used when testing whether the straight path to the goal is blocked.
    pub block_margin: f64,
}

impl Default for PacConfig {
    fn default() -> Self {
        Self {
            attract_gain: 1.0,
            repulse_gain: 0.6,
            influence_radius: 1.2,
            lateral_gain: 0.8,
            v_max: 0.5,
            omega_max: 1.5,
            goal_tolerance: 0.3,
            body_margin: 0.4,
            block_margin: 0.2,
        }
    }
}

fn unit(v: Vec2) -> Vec2 {
    let n = v.norm();
    if n > 1e-12 {
        v / n
    } else {
        Vec2::zeros()
    }
}

/// Distance along the ray `from -> to` at which it first meets the disc, if it does
/// before reaching `to`.
fn segment_hits_disc(from: Vec2, to: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let d = to - from;
    let len = d.norm();
    if len < 1e-12 {
        return None;
    }
    let dir = d / len;
    let along = (center - from).dot(&dir).clamp(0.0, len);
    let closest = from + dir * along;
    ((closest - center).norm() < radius).then_some(along)
}

/// Net steering force at the midpoint.
pub fn pac_force(state: &MidpointState, env: &Environment, cfg: &PacConfig) -> Vec2 {
    let p = state.position;
    let mut force = unit(env.goal - p) * cfg.attract_gain;

    for ob in &env.obstacles {
        let d = ((p - ob.center).norm() - ob.radius - cfg.body_margin).max(1e-3);
        if d < cfg.influence_radius {
            let mag = cfg.repulse_gain * (1.0 / d - 1.0 / cfg.influence_radius) / (d * d);
            force += unit(p - ob.center) * mag;
        }
    }

    let blocking = env
        .obstacles
        .iter()
        .filter_map(|ob| {
            let r = ob.radius + cfg.body_margin + cfg.block_margin;
            segment_hits_disc(p, env.goal, ob.center, r).map(|t| (t, ob))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((_, ob)) = blocking {
        let away = unit(p - ob.center);
        let left = Vec2::new(-away.y, away.x);
        // detour on the side that needs the smaller heading change
        let side = if left.dot(&state.heading_vec()) >= 0.0 { left } else { -left };
        force += side * cfg.lateral_gain;
    }
    force
}

pub fn pac_command(state: &MidpointState, env: &Environment, cfg: &PacConfig) -> Action {
    let force = pac_force(state, env, cfg);
    let err = wrap_angle(force.y.atan2(force.x) - state.heading);
    let v = (force.norm() * err.cos()).clamp(0.0, cfg.v_max);
    let omega = (cfg.omega_max * err / PI * 3.0).clamp(-cfg.omega_max, cfg.omega_max);
    Action { v, omega }
}
