//! End-to-end acceptance criteria, one PASS/FAIL line each.
//!
//! `FDP_ACCEPTANCE=1,2,6` runs a subset. Failures are reported but only make
//! the process exit nonzero when `FDP_ACCEPTANCE_STRICT` is set.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use formation_diffusion::config::RunConfig;
use formation_diffusion::controllers::{FormationConfig, FormationTracker};
use formation_diffusion::data::metrics::paired_means;
use formation_diffusion::data::{
    evaluate_policy, fixed_draw_loss, generate_dataset, sample_environments, train, window_samples, PolicyReport,
    TrainConfig, TrainingSample, STREAM_EVAL,
};
use formation_diffusion::ddpm::{add_noise, cosine_signal, denoise_step, NoiseSchedule, MAX_BETA};
use formation_diffusion::graph::{
    distance_errors, formation_error, numerical_rank, rigidity_function, rigidity_matrix, DirectedGraph, Framework,
    Vec2,
};
use formation_diffusion::nn::{
    check_gradients, load_checkpoint, save_checkpoint, AdamWConfig, Batch, Checkpoint, ConditionalUnet1d,
    NetworkConfig, ParameterStore,
};
use formation_diffusion::policy::{Controller, DiffusionModel, Normalizer};
use formation_diffusion::world::{leaders_from_midpoint, Action, MidpointState, WorldConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.json");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_framework(r: &mut ChaCha8Rng) -> Framework {
    let n = r.random_range(3..8);
    let mut edges: Vec<(usize, usize)> = (2..=n).map(|v| (r.random_range(1..v), v)).collect();
    for i in 1..=n {
        for j in i + 1..=n {
            if !edges.contains(&(i, j)) && r.random_bool(0.4) {
                edges.push((i, j));
            }
        }
    }
    let positions = (0..n).map(|_| Vec2::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
    let desired = edges.iter().map(|_| r.random_range(0.5..4.0)).collect();
    Framework::new(DirectedGraph::new(n, edges, 2).unwrap(), positions, desired).unwrap()
}

fn c1_rigidity() -> Result<Verdict> {
    let mut r = rng(11);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let fw = random_framework(&mut r);
        let n = fw.graph.vertex_count();
        let mut fd = DMatrix::zeros(fw.graph.edge_count(), 2 * n);
        for v in 0..n {
            for d in 0..2 {
                let (mut p, mut m) = (fw.clone(), fw.clone());
                p.positions[v][d] += h;
                m.positions[v][d] -= h;
                fd.set_column(2 * v + d, &((rigidity_function(&p) - rigidity_function(&m)) / (4.0 * h)));
            }
        }
        worst = worst.max((rigidity_matrix(&fw) - fd).abs().max());
    }
    let square = Framework::new(
        DirectedGraph::unit_square(),
        vec![Vec2::new(-0.5, 0.0), Vec2::new(0.5, 0.0), Vec2::new(-0.5, -1.0), Vec2::new(0.5, -1.0)],
        vec![1.0, 2.0, 1.0, 1.0, 1.0],
    )?;
    let rank = numerical_rank(&rigidity_matrix(&square));
    verdict(worst < 1e-6 && rank == 5, format!("max |R - J/2| = {worst:.2e}, square rank {rank}"))
}

fn c2_schedule() -> Result<Verdict> {
    let s = NoiseSchedule::cosine(100)?;
    let f0 = cosine_signal(0.0, 100);
    let mut worst: f64 = 0.0;
    for k in 1..=100 {
        if s.betas[k - 1] >= MAX_BETA {
            break;
        }
        worst = worst.max((s.alpha_bars[k - 1] - cosine_signal(k as f64, 100) / f0).abs());
    }
    let last = s.alpha_bars[99];
    verdict(worst < 1e-10 && last < 0.01, format!("max closed-form error {worst:.2e}, alpha_bar_99 = {last:.2e}"))
}

fn c3_round_trip() -> Result<Verdict> {
    let mut r = rng(21);
    let sched = NoiseSchedule::cosine(100)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let clean: Vec<f64> = (0..128).map(|_| r.random_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..128).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut x = add_noise(&clean, &noise, 99, &sched)?;
        for k in (0..100).rev() {
            let ab = sched.alpha_bars[k];
            let eps: Vec<f64> = x.iter().zip(&clean).map(|(xi, c)| (xi - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect();
            x = denoise_step(&x, &eps, k, &sched, &vec![0.0; 128])?;
        }
        worst = worst.max(x.iter().zip(&clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    verdict(worst < 1e-6, format!("L-inf reconstruction error {worst:.2e}"))
}

fn c4_gradients() -> Result<Verdict> {
    let (horizon, obs_dim) = (8, 5);
    let net = ConditionalUnet1d::new(NetworkConfig {
        down_dims: vec![8, 16],
        step_embed_dim: 8,
        cond_dim: obs_dim,
        ..NetworkConfig::default()
    })?;
    let sched = NoiseSchedule::cosine(20)?;
    let mut worst: f64 = 0.0;
    for seed in [1, 2, 3] {
        let mut r = rng(seed);
        let mut p: ParameterStore<f64> = net.init_params(&mut r);
        for v in p.flat_mut() {
            *v += r.random_range(-0.3..0.3);
        }
        let b = 3;
        let n = b * horizon * 2;
        let batch = Batch {
            b,
            horizon,
            obs: (0..b * obs_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            actions: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let ks: Vec<usize> = (0..b).map(|_| r.random_range(0..20)).collect();
        let eps: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let g = check_gradients(&net, &p, &sched, &batch, &ks, &eps, 1e-5, 1e-6)?;
        ensure!(g.checked == p.len(), "only {} of {} parameters checked", g.checked, p.len());
        worst = worst.max(g.max_rel_error);
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 3 seeds"))
}

const OVERFIT_PAIRS: usize = 16;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_REPEAT: usize = 4;

/// One window from the middle of each of 16 demonstrations.
fn overfit_pairs(cfg: &RunConfig) -> Result<(Vec<TrainingSample>, Normalizer)> {
    let dg = formation_diffusion::data::DatagenConfig { episodes: OVERFIT_PAIRS, seed: 5, ..cfg.datagen.clone() };
    let recs = generate_dataset(&dg, &cfg.world, &cfg.formation, &cfg.pac, 1, |_, _| {})?;
    let norm = Normalizer::from_records(&recs)?;
    let mut pairs = Vec::new();
    for r in &recs {
        let w = window_samples(r, &cfg.diffusion.policy, &norm)?;
        pairs.push(w[w.len() / 2].clone());
    }
    Ok((pairs, norm))
}

fn c5_overfit() -> Result<Verdict> {
    let cfg = RunConfig::default();
    let (pairs, norm) = overfit_pairs(&cfg)?;
    let policy = cfg.diffusion.policy;
    let net_cfg = NetworkConfig { down_dims: vec![32, 64, 128], step_embed_dim: 64, ..NetworkConfig::default() };
    let repeated: Vec<TrainingSample> = (0..OVERFIT_REPEAT).flat_map(|_| pairs.iter().cloned()).collect();
    let tc = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: repeated.len(),
        warmup_steps: 100,
        max_steps: Some(OVERFIT_STEPS),
        seed: 0,
        optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
    };
    let out = train(&repeated, &net_cfg, &policy, &norm, &tc, |_, _, _| {})?;
    let net = ConditionalUnet1d::new(out.checkpoint.meta.network.clone())?;
    let sched = NoiseSchedule::cosine(policy.diffusion_steps)?;
    let loss = fixed_draw_loss(&net, &out.checkpoint.params, &sched, &pairs, 16, 99)?;
    let model = DiffusionModel::new(net, out.checkpoint.params.clone(), norm.clone(), policy)?;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for p in &pairs {
        let plan = model.sample_plan(&p.obs, &mut r)?;
        for (a, n) in plan.iter().zip(p.actions.chunks(2)) {
            let d = norm.denormalize_action(&[n[0], n[1]]);
            worst = worst.max((a.v - d[0]).abs()).max((a.omega - d[1]).abs());
        }
    }
    verdict(
        out.steps <= OVERFIT_STEPS && loss < 1e-3 && worst < 0.05,
        format!("{} steps, epsilon loss {loss:.2e}, plan L-inf error {worst:.3}", out.steps),
    )
}

fn c6_convergence() -> Result<Verdict> {
    // static leaders, error sampled every millisecond
    let cfg = FormationConfig { follower_dt: 1e-6, ..FormationConfig::default() };
    let tr = FormationTracker::new(&cfg)?;
    let leaders = [Vec2::new(-0.5, 0.0), Vec2::new(0.5, 0.0)];
    let mut f = cfg.initial_followers();
    let mut hit = None;
    let mut at_end = 0.0;
    for s in 1..=10_000 {
        tr.hold(&leaders, &mut f, 1e-3)?;
        let e = distance_errors(&tr.framework(&leaders, &f)).norm();
        if hit.is_none() && e < 1e-3 {
            hit = Some(s as f64 * 1e-3);
        }
        at_end = e;
    }

    let cfg = FormationConfig::default();
    let tr = FormationTracker::new(&cfg)?;
    let mut f = cfg.initial_followers();
    let mid = |t: f64| MidpointState::at_rest(Vec2::new(0.0, 0.3 * t), FRAC_PI_2);
    let mut steady: f64 = 0.0;
    for s in 0..200 {
        let t = s as f64 * 0.1;
        tr.advance(&mid(t), Action::new(0.3, 0.0), 0.1, 1.0, &mut f)?;
        if s >= 150 {
            steady = steady.max(formation_error(&tr.framework(&leaders_from_midpoint(&mid(t + 0.1), 1.0), &f)));
        }
    }
    let hit_txt = hit.map_or("never".into(), |t| format!("{t:.3} s"));
    verdict(
        hit.is_some() && steady < 0.05,
        format!("static |eps| < 1e-3 first at {hit_txt} (|eps| at 10 s: {at_end:.1e}); moving e_d max over 15-20 s {steady:.3}"),
    )
}

fn world_with(obstacles: usize) -> WorldConfig {
    let mut w = WorldConfig::default();
    w.env.min_obstacles = obstacles;
    w.env.max_obstacles = obstacles;
    w
}

fn c7_baselines() -> Result<Verdict> {
    let cfg = RunConfig::from_json(DESK)?;
    let three = world_with(3);
    let envs = sample_environments(cfg.seeds.eval, STREAM_EVAL, 20, &three)?;
    let (pac, _) = evaluate_policy(&Controller::Pac(cfg.pac.clone()), &envs, &three, &cfg.formation, 1)?;
    let free = world_with(0);
    let envs = sample_environments(cfg.seeds.eval, STREAM_EVAL, 20, &free)?;
    let (mppi, _) = evaluate_policy(&Controller::Mppi(cfg.mppi.clone()), &envs, &free, &cfg.formation, 1)?;
    verdict(
        pac.success_rate >= 90.0 && mppi.success_rate == 100.0,
        format!("PAC {:.0}% with 3 obstacles, MPPI {:.0}% obstacle-free", pac.success_rate, mppi.success_rate),
    )
}

struct Desk {
    cfg: RunConfig,
    model: DiffusionModel,
    diffusion: PolicyReport,
}

fn desk_model() -> Result<(RunConfig, DiffusionModel, Checkpoint, usize)> {
    let cfg = RunConfig::from_json(DESK)?;
    let dg = formation_diffusion::data::DatagenConfig { seed: cfg.seeds.data, ..cfg.datagen.clone() };
    let recs = generate_dataset(&dg, &cfg.world, &cfg.formation, &cfg.pac, 1, |_, _| {})?;
    let norm = Normalizer::from_records(&recs)?;
    let mut samples = Vec::new();
    for r in &recs {
        samples.extend(window_samples(r, &cfg.diffusion.policy, &norm)?);
    }
    let tc = TrainConfig { seed: cfg.seeds.train, ..cfg.diffusion.train.clone() };
    let out = train(&samples, &cfg.diffusion.network, &cfg.diffusion.policy, &norm, &tc, |_, _, _| {})?;
    let ck = out.checkpoint;
    let net = ConditionalUnet1d::new(ck.meta.network.clone())?;
    let model = DiffusionModel::new(net, ck.ema.clone(), norm, cfg.diffusion.policy)?;
    Ok((cfg, model, ck, recs.len()))
}

fn c8_desk(slot: &mut Option<Desk>) -> Result<Verdict> {
    let (cfg, model, _, demos) = desk_model()?;
    let envs = sample_environments(cfg.seeds.eval, STREAM_EVAL, 20, &cfg.world)?;
    let ctl = Controller::Diffusion { model: &model, candidates: 1 };
    let (diffusion, _) = evaluate_policy(&ctl, &envs, &cfg.world, &cfg.formation, 1)?;
    let (mppi, _) = evaluate_policy(&Controller::Mppi(cfg.mppi.clone()), &envs, &cfg.world, &cfg.formation, 1)?;
    let paired = paired_means(&diffusion, &mppi, "control_smoothness");
    let smooth_ok = paired.is_some_and(|(d, m, _)| d < m);
    let smooth_txt = match paired {
        Some((d, m, n)) => format!("smoothness {d:.3} vs MPPI {m:.3} on {n} paired episodes"),
        None => "no paired successes".into(),
    };
    let pass = diffusion.success_rate >= 40.0 && smooth_ok;
    let detail = format!("{demos} demos, success {:.0}% (MPPI {:.0}%), {smooth_txt}", diffusion.success_rate, mppi.success_rate);
    *slot = Some(Desk { cfg, model, diffusion });
    verdict(pass, detail)
}

fn c9_adaptive(slot: &mut Option<Desk>) -> Result<Verdict> {
    if slot.is_none() {
        let (cfg, model, _, _) = desk_model()?;
        let envs = sample_environments(cfg.seeds.eval, STREAM_EVAL, 20, &cfg.world)?;
        let ctl = Controller::Diffusion { model: &model, candidates: 1 };
        let (diffusion, _) = evaluate_policy(&ctl, &envs, &cfg.world, &cfg.formation, 1)?;
        *slot = Some(Desk { cfg, model, diffusion });
    }
    let desk = slot.as_ref().unwrap();
    let envs = sample_environments(desk.cfg.seeds.eval, STREAM_EVAL, 20, &desk.cfg.world)?;
    let ctl = Controller::Diffusion { model: &desk.model, candidates: 10 };
    let (adaptive, _) = evaluate_policy(&ctl, &envs, &desk.cfg.world, &desk.cfg.formation, 1)?;
    let (a, s) = (adaptive.mean_min_clearance(), desk.diffusion.mean_min_clearance());
    verdict(
        a >= s,
        format!(
            "mean min-clearance {a:.3} (adaptive, {:.0}% success) vs {s:.3} (standard, {:.0}%)",
            adaptive.success_rate, desk.diffusion.success_rate
        ),
    )
}

fn fdp(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_fdp")).args(args).output()?;
    ensure!(out.status.success(), "fdp {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn c10_determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg = p("small.json");
    std::fs::write(
        &cfg,
        r#"{"diffusion":{"network":{"down_dims":[8,16,32],"step_embed_dim":16},"train":{"batch_size":16}}}"#,
    )?;
    fdp(&["--config", &cfg, "gen-data", "--out", &p("d.ndjson"), "--episodes", "4"])?;
    fdp(&["--config", &cfg, "train", "--data", &p("d.ndjson"), "--out", &p("m.ckpt"), "--steps", "20"])?;
    fdp(&["--config", &cfg, "compare", "--episodes", "20", "--ckpt", &p("m.ckpt"), "--out", &p("a.csv")])?;
    fdp(&["--config", &cfg, "--jobs", "2", "compare", "--episodes", "20", "--ckpt", &p("m.ckpt"), "--out", &p("b.csv")])?;
    let (a, b) = (std::fs::read(p("a.csv"))?, std::fs::read(p("b.csv"))?);
    let csv_same = a == b && !a.is_empty();

    let original = std::fs::read(p("m.ckpt"))?;
    let loaded = load_checkpoint(Path::new(&p("m.ckpt")))?;
    save_checkpoint(&loaded, Path::new(&p("m2.ckpt")))?;
    let ckpt_same = std::fs::read(p("m2.ckpt"))? == original && Checkpoint::from_bytes(&original)? == loaded;
    let columns = String::from_utf8_lossy(&a).lines().next().unwrap_or_default().to_string();
    verdict(
        csv_same && ckpt_same,
        format!("CSV identical: {csv_same} ({} bytes; {columns}), checkpoint identical: {ckpt_same}", a.len()),
    )
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("FDP_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut desk: Option<Desk> = None;
    let mut failed = 0;

    let mut run = |id: u32, name: &str, budget_s: u64, f: &mut dyn FnMut() -> Result<Verdict>| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let res = f().with_context(|| format!("criterion {id}"));
        let elapsed = start.elapsed();
        let budget = Duration::from_secs(budget_s);
        let (pass, mut detail) = match res {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let in_time = elapsed <= budget;
        if !in_time {
            detail.push_str("; over the runtime budget");
        }
        let ok = pass && in_time;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1} s of {} s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget_s
        );
    };

    run(1, "rigidity oracle", 1, &mut c1_rigidity);
    run(2, "scheduler closed form", 1, &mut c2_schedule);
    run(3, "diffusion round trip", 1, &mut c3_round_trip);
    run(4, "gradient correctness", 120, &mut c4_gradients);
    run(5, "overfit capacity", 600, &mut c5_overfit);
    run(6, "controller convergence", 30, &mut c6_convergence);
    run(7, "baseline sanity", 300, &mut c7_baselines);
    run(8, "end-to-end desk reproduction", 3600, &mut || c8_desk(&mut desk));
    run(9, "adaptive variant", 900, &mut || c9_adaptive(&mut desk));
    run(10, "determinism", 300, &mut c10_determinism);

    println!("acceptance: {failed} failed");
    if failed > 0 && std::env::var_os("FDP_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
