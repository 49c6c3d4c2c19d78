//! Per-episode quality metrics and policy-level aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{par_map, EpisodeRecord};
use crate::controllers::FormationConfig;
use crate::error::{Error, Result};
use crate::graph::Vec2;
use crate::policy::{run_episode, Controller};
use crate::world::{wrap_angle, Environment, Outcome, WorldConfig};

/// Order of the rows in reports.
pub const METRIC_NAMES: [&str; 14] = [
    "path_length",
    "path_optimality",
    "tracking_deviation",
    "min_clearance",
    "mean_clearance",
    "mean_control",
    "control_smoothness",
    "energy",
    "time",
    "mean_velocity",
    "mean_curvature",
    "peak_curvature",
    "jerk",
    "orientation_stability",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub path_length: f64,
    pub path_optimality: f64,
    pub tracking_deviation: f64,
    pub min_clearance: f64,
    pub mean_clearance: f64,
    pub mean_control: f64,
    pub control_smoothness: f64,
    pub energy: f64,
    pub time: f64,
    pub mean_velocity: f64,
    pub mean_curvature: f64,
    pub peak_curvature: f64,
    pub jerk: f64,
    pub orientation_stability: f64,
}

impl EpisodeMetrics {
    pub fn values(&self) -> [f64; 14] {
        [
            self.path_length,
            self.path_optimality,
            self.tracking_deviation,
            self.min_clearance,
            self.mean_clearance,
            self.mean_control,
            self.control_smoothness,
            self.energy,
            self.time,
            self.mean_velocity,
            self.mean_curvature,
            self.peak_curvature,
            self.jerk,
            self.orientation_stability,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&n| n == name).map(|i| self.values()[i])
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Metrics on the midpoint path with step `dt`. The straight-line reference
/// runs from the first to the last recorded position.
pub fn compute_metrics(record: &EpisodeRecord, dt: f64) -> Result<EpisodeMetrics> {
    let steps = record.steps();
    if steps < 2 {
        return Err(Error::Dataset(format!("episode {} has {steps} steps; metrics need 2", record.seed)));
    }
    let pos: Vec<Vec2> = record.states.iter().map(|s| Vec2::new(s[0], s[1])).collect();
    let seg: Vec<f64> = pos.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let path_length: f64 = seg.iter().sum();
    let (start, end) = (pos[0], *pos.last().unwrap());
    let direct = (end - start).norm();
    let path_optimality = if path_length > 0.0 { direct / path_length } else { 1.0 };

    let tracking_deviation = if direct > 0.0 {
        let u = (end - start) / direct;
        mean(pos.iter().map(|p| {
            let d = p - start;
            (d.x * u.y - d.y * u.x).abs()
        }))
    } else {
        mean(pos.iter().map(|p| (p - start).norm()))
    };

    let min_clearance = record.clearance.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_clearance = mean(record.clearance.iter().copied());

    let acts = record.executed_actions();
    let norm = |a: &[f64; 2]| (a[0] * a[0] + a[1] * a[1]).sqrt();
    let mean_control = mean(acts.iter().map(norm));
    let control_smoothness = mean(acts.windows(2).map(|w| norm(&[w[1][0] - w[0][0], w[1][1] - w[0][1]]) / dt));
    let energy = acts.iter().map(|a| norm(a).powi(2) * dt).sum();
    let time = steps as f64 * dt;
    let mean_velocity = path_length / time;

    let curv: Vec<f64> = record
        .states
        .windows(2)
        .zip(&seg)
        .map(|(w, &l)| wrap_angle(w[1][2] - w[0][2]).abs() / l.max(1e-6))
        .collect();
    let mean_curvature = mean(curv.iter().copied());
    let peak_curvature = curv.iter().copied().fold(0.0, f64::max);

    let vel: Vec<Vec2> = record.states.iter().map(|s| Vec2::new(s[3], s[4])).collect();
    let jerk = mean(vel.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).norm() / (dt * dt)));
    let omegas: Vec<f64> = acts.iter().map(|a| a[1]).collect();
    let orientation_stability = mean_std(&omegas).1;

    Ok(EpisodeMetrics {
        path_length,
        path_optimality,
        tracking_deviation,
        min_clearance,
        mean_clearance,
        mean_control,
        control_smoothness,
        energy,
        time,
        mean_velocity,
        mean_curvature,
        peak_curvature,
        jerk,
        orientation_stability,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    /// Lowest clearance over the whole rollout, whatever the outcome.
    pub min_clearance: f64,
    pub metrics: Option<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    /// `(mean, std)` over successful episodes.
    pub metrics: BTreeMap<String, (f64, f64)>,
    pub rows: Vec<EpisodeRow>,
}

impl PolicyReport {
    pub fn from_records(policy: String, records: &[EpisodeRecord], dt: f64) -> Self {
        let rows: Vec<EpisodeRow> = records
            .iter()
            .enumerate()
            .map(|(i, r)| EpisodeRow {
                episode: i,
                seed: r.seed,
                outcome: r.outcome,
                steps: r.steps(),
                min_clearance: r.clearance.iter().copied().fold(f64::INFINITY, f64::min),
                metrics: compute_metrics(r, dt).ok(),
            })
            .collect();
        let count = |o: Outcome| rows.iter().filter(|r| r.outcome == o).count();
        let successes = count(Outcome::Success);
        let ok: Vec<&EpisodeMetrics> =
            rows.iter().filter(|r| r.outcome == Outcome::Success).filter_map(|r| r.metrics.as_ref()).collect();
        let metrics = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let xs: Vec<f64> = ok.iter().map(|m| m.values()[i]).collect();
                (name.to_string(), mean_std(&xs))
            })
            .collect();
        Self {
            policy,
            episodes: rows.len(),
            successes,
            collisions: count(Outcome::Collision),
            timeouts: count(Outcome::Timeout),
            success_rate: if rows.is_empty() { 0.0 } else { 100.0 * successes as f64 / rows.len() as f64 },
            metrics,
            rows,
        }
    }

    pub fn mean_min_clearance(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.min_clearance))
    }
}

/// Mean of `metric` for `a` and `b` over episodes both policies completed.
pub fn paired_means(a: &PolicyReport, b: &PolicyReport, metric: &str) -> Option<(f64, f64, usize)> {
    let pairs: Vec<(f64, f64)> = a
        .rows
        .iter()
        .zip(&b.rows)
        .filter(|(x, y)| x.seed == y.seed && x.outcome == Outcome::Success && y.outcome == Outcome::Success)
        .filter_map(|(x, y)| Some((x.metrics?.get(metric)?, y.metrics?.get(metric)?)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    Some((pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n, pairs.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub policies: Vec<PolicyReport>,
}

impl MetricsReport {
    pub fn new(policies: Vec<PolicyReport>) -> Self {
        Self {
            note: "quality metrics aggregate successful episodes only; success rate counts all episodes".into(),
            policies,
        }
    }

    /// One row per metric, one column per policy; cells are `mean ± std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for p in &self.policies {
            out.push(',');
            out.push_str(&p.policy);
        }
        out.push('\n');
        let mut row = |name: &str, cell: &dyn Fn(&PolicyReport) -> String| {
            out.push_str(name);
            for p in &self.policies {
                out.push(',');
                out.push_str(&cell(p));
            }
            out.push('\n');
        };
        row("success_rate", &|p| format!("{:.2}", p.success_rate));
        row("successes", &|p| p.successes.to_string());
        row("collisions", &|p| p.collisions.to_string());
        row("timeouts", &|p| p.timeouts.to_string());
        for name in METRIC_NAMES {
            row(name, &|p| {
                let (m, s) = p.metrics[name];
                if m.is_finite() {
                    format!("{m:.4} ± {s:.4}")
                } else {
                    "n/a".into()
                }
            });
        }
        out
    }
}

/// Runs `controller` on every environment (episode seed = environment seed).
pub fn evaluate_policy(
    controller: &Controller<'_>,
    envs: &[Environment],
    world: &WorldConfig,
    formation: &FormationConfig,
    jobs: usize,
) -> Result<(PolicyReport, Vec<EpisodeRecord>)> {
    if envs.is_empty() {
        return Err(Error::Empty("evaluation environments"));
    }
    let records = par_map(envs, jobs, |env| run_episode(controller, env, world, formation, env.seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((PolicyReport::from_records(controller.name(), &records, world.dt), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::MidpointState;

    fn path(points: &[(f64, f64)], heading: &[f64], actions: &[[f64; 2]]) -> EpisodeRecord {
        let mut r = EpisodeRecord::new(Environment::empty(Vec2::new(3.0, 6.5)), "t".into(), 0);
        for (i, &(x, y)) in points.iter().enumerate() {
            let mut s = MidpointState::at_rest(Vec2::new(x, y), heading[i]);
            s.lin_vel = actions[i][0];
            r.states.push(s.to_vector());
            r.actions.push(actions[i]);
            r.leaders.push([[0.0; 2]; 2]);
            r.followers.push(vec![]);
            r.clearance.push(1.0);
        }
        r.outcome = Outcome::Success;
        r
    }

    #[test]
    fn straight_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (0.0, i as f64 * 0.05)).collect();
        let r = path(&pts, &[std::f64::consts::FRAC_PI_2; 10], &[[0.5, 0.0]; 10]);
        let m = compute_metrics(&r, 0.1).unwrap();
        assert!((m.path_optimality - 1.0).abs() < 1e-12);
        assert!(m.tracking_deviation.abs() < 1e-12);
        assert_eq!(m.mean_curvature, 0.0);
        assert!(m.jerk.abs() < 1e-9);
        assert_eq!(m.control_smoothness, 0.0);
        assert!((m.time - 0.9).abs() < 1e-12);
        assert!((m.energy - 9.0 * 0.25 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn corner_path() {
        let r = path(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)], &[0.0; 3], &[[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]]);
        let m = compute_metrics(&r, 0.1).unwrap();
        assert!((m.path_length - 2.0).abs() < 1e-12);
        assert!((m.path_optimality - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(m.path_optimality > 0.0 && m.path_optimality <= 1.0);
        let short = path(&[(0.0, 0.0), (0.0, 1.0)], &[0.0; 2], &[[1.0, 0.0]; 2]);
        assert!(compute_metrics(&short, 0.1).is_err());
    }

    #[test]
    fn report_rates_and_csv() {
        let ok = path(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)], &[0.0; 3], &[[1.0, 0.0]; 3]);
        let mut bad = ok.clone();
        bad.outcome = Outcome::Collision;
        bad.seed = 1;
        let rep = PolicyReport::from_records("x".into(), &[ok.clone(), bad, ok], 0.1);
        assert!((rep.success_rate - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.metrics["path_length"], (2.0, 0.0));
        let csv = MetricsReport::new(vec![rep.clone(), rep]).to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 + METRIC_NAMES.len());
        assert!(csv.starts_with("metric,x,x\nsuccess_rate,66.67,66.67\n"));
    }
}
