use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use formation_diffusion::config::RunConfig;
use formation_diffusion::data::metrics::PolicyReport;
use formation_diffusion::data::{
    evaluate_policy, generate_dataset, read_ndjson, render_svg, sample_environments, train, window_samples,
    write_ndjson, MetricsReport, STREAM_EVAL,
};
use formation_diffusion::nn::{load_checkpoint, save_checkpoint, ConditionalUnet1d};
use formation_diffusion::policy::{run_episode, Controller, DiffusionModel, Normalizer};
use formation_diffusion::world::sample_environment;
use serde_json::json;

/// Leader-follower formation navigation: demonstrations, diffusion-policy
/// training and closed-loop evaluation against PAC and MPPI.
#[derive(Parser, Debug)]
#[command(name = "fdp", version)]
struct Cli {
    /// JSON run configuration; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for episode-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect successful PAC demonstrations as NDJSON.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of successful episodes to keep [default: config datagen.episodes = 200].
        #[arg(long)]
        episodes: Option<usize>,
        /// Base seed [default: config seeds.data = 0].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the noise-prediction network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// [default: config diffusion.train.epochs = 30]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: config diffusion.train.batch_size = 64]
        #[arg(long)]
        batch: Option<usize>,
        /// Comma-separated channel widths [default: 64,128,256].
        #[arg(long, value_delimiter = ',')]
        down_dims: Option<Vec<usize>>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// [default: config seeds.train = 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one episode and print its outcome.
    Rollout {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        seed: u64,
        /// Write an SVG of the trajectory.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Write the episode record as JSON.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Evaluate one policy and write a JSON report.
    Eval {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        report: PathBuf,
        /// Base seed of the evaluation environments [default: config seeds.eval = 1].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run PAC, MPPI and (with --ckpt) the diffusion policy on the same environments.
    Compare {
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Candidates for the diffusion policy.
        #[arg(long, default_value_t = 1)]
        adaptive: usize,
        /// [default: config seeds.eval = 1]
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PolicyKind {
    Diffusion,
    Pac,
    Mppi,
}

#[derive(Args, Debug)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: PolicyKind,
    /// Checkpoint, required for the diffusion policy.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Number of sampled candidates; 1 is the standard policy.
    #[arg(long, default_value_t = 1)]
    adaptive: usize,
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn load_model(path: &Path) -> Result<DiffusionModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let net = ConditionalUnet1d::new(ckpt.meta.network.clone())?;
    Ok(DiffusionModel::new(net, ckpt.ema, ckpt.meta.normalizer, ckpt.meta.policy)?)
}

fn controller<'a>(kind: PolicyKind, cfg: &RunConfig, model: Option<&'a DiffusionModel>, adaptive: usize) -> Result<Controller<'a>> {
    Ok(match kind {
        PolicyKind::Pac => Controller::Pac(cfg.pac.clone()),
        PolicyKind::Mppi => Controller::Mppi(cfg.mppi.clone()),
        PolicyKind::Diffusion => match model {
            Some(model) => Controller::Diffusion { model, candidates: adaptive.max(1) },
            None => bail!(UsageError("the diffusion policy needs --ckpt".into())),
        },
    })
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenData { out, episodes, seed } => {
            let mut dg = cfg.datagen.clone();
            dg.episodes = episodes.unwrap_or(dg.episodes);
            dg.seed = seed.unwrap_or(cfg.seeds.data);
            let recs = generate_dataset(&dg, &cfg.world, &cfg.formation, &cfg.pac, jobs, |kept, attempts| {
                emit(json!({"event": "gen-data", "kept": kept, "attempts": attempts}))
            })?;
            write_ndjson(&out, &recs)?;
            emit(json!({"event": "done", "episodes": recs.len(), "out": out}));
        }
        Command::Train { data, out, epochs, batch, down_dims, steps, seed } => {
            let recs = read_ndjson(&data)?;
            if recs.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let d = &cfg.diffusion;
            let norm = Normalizer::from_records(&recs)?;
            let mut samples = Vec::new();
            for r in &recs {
                samples.extend(window_samples(r, &d.policy, &norm)?);
            }
            let mut tc = d.train.clone();
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.batch_size = batch.unwrap_or(tc.batch_size);
            tc.max_steps = steps.or(tc.max_steps);
            tc.seed = seed.unwrap_or(cfg.seeds.train);
            let mut net = d.network.clone();
            if let Some(dims) = down_dims {
                net.down_dims = dims;
            }
            emit(json!({"event": "train-start", "episodes": recs.len(), "samples": samples.len()}));
            let res = train(&samples, &net, &d.policy, &norm, &tc, |epoch, step, loss| {
                if step % 100 == 0 {
                    emit(json!({"event": "train", "epoch": epoch, "step": step, "loss": loss}));
                }
            })?;
            save_checkpoint(&res.checkpoint, &out)?;
            emit(json!({"event": "done", "steps": res.steps, "epoch_losses": res.epoch_losses, "out": out}));
        }
        Command::Rollout { policy, seed, render, record } => {
            let model = policy.ckpt.as_deref().map(load_model).transpose()?;
            let ctl = controller(policy.policy, &cfg, model.as_ref(), policy.adaptive)?;
            let env = sample_environment(seed, &cfg.world.env, cfg.world.start)?;
            let rec = run_episode(&ctl, &env, &cfg.world, &cfg.formation, seed)?;
            if let Some(path) = render {
                render_svg(&rec, &env, &path)?;
            }
            if let Some(path) = record {
                std::fs::write(&path, serde_json::to_string(&rec)?)?;
            }
            emit(json!({
                "event": "done", "policy": rec.policy, "seed": seed,
                "outcome": rec.outcome, "steps": rec.steps(),
            }));
        }
        Command::Eval { policy, episodes, report, seed } => {
            let model = policy.ckpt.as_deref().map(load_model).transpose()?;
            let ctl = controller(policy.policy, &cfg, model.as_ref(), policy.adaptive)?;
            let envs = sample_environments(seed.unwrap_or(cfg.seeds.eval), STREAM_EVAL, episodes, &cfg.world)?;
            let (rep, _) = evaluate_policy(&ctl, &envs, &cfg.world, &cfg.formation, jobs)?;
            emit(json!({"event": "eval", "policy": rep.policy, "success_rate": rep.success_rate}));
            std::fs::write(&report, serde_json::to_string_pretty(&MetricsReport::new(vec![rep]))?)?;
            emit(json!({"event": "done", "report": report}));
        }
        Command::Compare { episodes, out, report, ckpt, adaptive, seed } => {
            let model = ckpt.as_deref().map(load_model).transpose()?;
            let envs = sample_environments(seed.unwrap_or(cfg.seeds.eval), STREAM_EVAL, episodes, &cfg.world)?;
            let mut kinds = vec![PolicyKind::Pac, PolicyKind::Mppi];
            if model.is_some() {
                kinds.push(PolicyKind::Diffusion);
            } else {
                emit(json!({"event": "note", "message": "no --ckpt given; diffusion column omitted"}));
            }
            let mut reports: Vec<PolicyReport> = Vec::new();
            for kind in kinds {
                let ctl = controller(kind, &cfg, model.as_ref(), adaptive)?;
                let (rep, _) = evaluate_policy(&ctl, &envs, &cfg.world, &cfg.formation, jobs)?;
                emit(json!({"event": "eval", "policy": rep.policy, "success_rate": rep.success_rate}));
                reports.push(rep);
            }
            let full = MetricsReport::new(reports);
            std::fs::write(&out, full.to_csv())?;
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&full)?)?;
            }
            emit(json!({"event": "done", "out": out}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
