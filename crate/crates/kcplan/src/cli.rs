//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use kcplan_core::dataset::PlanningProblem;
use kcplan_core::denoiser::Denoiser;
use kcplan_core::keyconfig::select_key_configurations;
use kcplan_core::metrics::TrajectoryMetrics;
use kcplan_core::seed::{rng_for, stream};
use kcplan_core::training::train;
use kcplan_core::Trajectory;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{annotate_phi, build_dataset, heldout_problems};
use crate::eval::{aggregate, render_svg, run_benchmark, run_problem, write_benchmark_csv, write_problem_csv, Method, Model, Settings};
use crate::io::{read_dataset, read_json, read_keys, write_dataset, write_json, write_loss_csv, DatasetHeader};

/// Environment variable holding the log filter (`error` .. `trace`).
pub const LOG_ENV: &str = "KCPLAN_LOG";

#[derive(Parser, Debug)]
#[command(name = "kcplan", version, about = "Diffusion-based motion planning for planar arms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate problems with ground-truth trajectories as JSON Lines.
    GenData(GenDataArgs),
    /// Select key configurations from a dataset and annotate it with φ.
    Keyconfig(KeyconfigArgs),
    /// Train the denoiser on an annotated dataset.
    Train(TrainArgs),
    /// Plan one problem with a trained model.
    Plan(PlanArgs),
    /// Run the benchmark and write tables and plots.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
    /// Difficulty level, 1 to 4.
    #[arg(long, default_value_t = 2)]
    pub level: u8,
    /// Number of records to attempt.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct KeyconfigArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for keys.json and the annotated dataset.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
    /// Annotated dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Also save a checkpoint every N optimizer steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingFlags {
    /// Samples per problem.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Cost guidance during sampling.
    #[arg(long, value_enum)]
    pub guidance: Option<Toggle>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    /// Problem JSON ({"q_s", "q_g", "env"}); drawn at random when omitted.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Level of the random problem.
    #[arg(long, default_value_t = 2)]
    pub level: u8,
    /// Optimizer iterations after sampling.
    #[arg(long, default_value_t = 50)]
    pub budget: usize,
    /// Output JSON with the trajectory and its metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long)]
    pub seed: u64,
    /// Needed by the pipeline and diffusion-only methods.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Levels to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub level: Option<Vec<u8>>,
    /// Problems per level.
    #[arg(long)]
    pub count: Option<usize>,
    /// Optimizer iteration budgets (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub budget_grid: Option<Vec<usize>>,
    /// Methods to run (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Record wall-clock timings (outputs are then no longer reproducible).
    #[arg(long)]
    pub timings: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_config(common: &Common, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, f: &SamplingFlags) -> Result<()> {
    if let Some(b) = f.batch {
        cfg.sampler.batch_size = b;
    }
    if let Some(g) = f.guidance {
        cfg.guidance.enabled = matches!(g, Toggle::On);
    }
    cfg.validate()
}

fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(&a.common, Some(a.seed))?;
    let (records, summary) = build_dataset(
        &cfg.domain,
        a.level,
        a.count,
        &cfg.arm,
        &cfg.ground_truth,
        a.seed,
        cfg.workers(),
    )?;
    write_dataset(&a.out, &DatasetHeader::new(Some(a.level), Some(a.seed)), &records)?;
    write_json(&echo_path(&a.out), &cfg)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn cmd_keyconfig(a: &KeyconfigArgs) -> Result<()> {
    let cfg = load_config(&a.common, a.seed)?;
    let seed = cfg.seed.unwrap_or(0);
    let (header, mut records) = read_dataset(&a.data)?;
    let mut rng = rng_for(seed, stream::KEYCONFIG, 0);
    let keys = select_key_configurations(&records, &cfg.arm, &cfg.keyconfig, &mut rng)
        .with_context(|| format!("key-configuration selection on {}", a.data.display()))?;
    annotate_phi(&mut records, &keys, &cfg.arm)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_json(&a.out.join("keys.json"), &keys)?;
    write_dataset(&a.out.join("dataset.jsonl"), &header, &records)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    info!("selected {} key configurations; annotated {} records", keys.len(), records.len());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, Some(a.seed))?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    cfg.train.seed = a.seed;
    let (_, records) = read_dataset(&a.data)?;
    let keys = read_keys(&a.keys, &cfg.arm)?;
    cfg.denoiser.n_keys = keys.len();
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut rng = rng_for(a.seed, stream::TRAINING, 0);
    let every = a.checkpoint_every.unwrap_or(0);
    let mut save_err: Option<anyhow::Error> = None;
    let (state, curve) = train(
        &records,
        &keys,
        &cfg.train,
        &sched,
        &cfg.denoiser,
        &cfg.arm,
        &mut rng,
        &mut |st, s| {
            if s.step % 100 == 0 {
                info!("step {} epoch {}: total {:.6} (diff {:.6})", s.step, s.epoch, s.loss.total, s.loss.diff);
            }
            if every > 0 && s.step % every == 0 && save_err.is_none() {
                let p = a.out.join(format!("model-step{}.ckpt", s.step));
                if let Err(e) = save_checkpoint(&p, st, &cfg.schedule) {
                    save_err = Some(e);
                }
            }
        },
    )
    .with_context(|| format!("training on {}", a.data.display()))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    save_checkpoint(&a.out.join("model.ckpt"), &state, &cfg.schedule)?;
    write_loss_csv(&a.out.join("loss.csv"), &curve)?;
    if let Some(last) = curve.last() {
        info!("finished after {} steps; final loss {:.6}", last.step, last.loss.total);
    }
    Ok(())
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    q_s: &'a [f64],
    q_g: &'a [f64],
    budget: usize,
    tau: &'a Trajectory,
    metrics: TrajectoryMetrics,
}

pub fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, a.seed)?;
    apply_sampling(&mut cfg, &a.sampling)?;
    let seed = cfg.seed.unwrap_or(0);
    let (state, sched_cfg) = load_checkpoint(&a.checkpoint)?;
    let keys = read_keys(&a.keys, &cfg.arm)?;
    if state.config.n_keys != keys.len() {
        bail!(
            "{} expects {} key configurations but {} holds {}",
            a.checkpoint.display(),
            state.config.n_keys,
            a.keys.display(),
            keys.len()
        );
    }
    let problem: PlanningProblem = match &a.problem {
        Some(p) => read_json(p)?,
        None => heldout_problems(&cfg.domain, a.level, 1, &cfg.arm, seed)?.remove(0),
    };
    problem.validate(&cfg.arm).context("problem endpoints")?;
    let net = Denoiser::new(state.config)?;
    let sched = sched_cfg.build()?;
    let model = Model {
        net: &net,
        params: &state.params,
        normalizer: &state.normalizer,
        keys: &keys,
        sched: &sched,
    };
    let eval = crate::config::EvalConfig {
        budgets: vec![a.budget],
        ..cfg.eval.clone()
    };
    let s = Settings {
        arm: &cfg.arm,
        sampler: &cfg.sampler,
        guidance: &cfg.guidance,
        trajopt: &cfg.trajopt,
        ground_truth: &cfg.ground_truth,
        eval: &eval,
    };
    let mut res = run_problem(&problem, &[Method::Pipeline], Some(&model), &s, 0, seed)?;
    let (_, mut outcomes) = res.pop().expect("one method");
    let o = outcomes.pop().expect("one budget");
    write_json(
        &a.out,
        &PlanOutput {
            q_s: &problem.q_s,
            q_g: &problem.q_g,
            budget: o.budget,
            tau: &o.tau,
            metrics: o.metrics,
        },
    )?;
    println!("{}", serde_json::to_string(&o.metrics)?);
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common, Some(a.seed))?;
    if let Some(l) = &a.level {
        cfg.eval.levels = l.clone();
    }
    if let Some(c) = a.count {
        cfg.eval.n_problems = c;
    }
    if let Some(b) = &a.budget_grid {
        cfg.eval.budgets = b.clone();
    }
    if let Some(m) = &a.methods {
        cfg.eval.methods = m.clone();
    }
    if a.timings {
        cfg.eval.timings = true;
    }
    apply_sampling(&mut cfg, &a.sampling)?;
    let methods: Vec<Method> = cfg.eval.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let needs_model = methods.iter().any(|m| m.needs_model());
    let loaded = if needs_model {
        let (ck, kp) = match (&a.checkpoint, &a.keys) {
            (Some(c), Some(k)) => (c, k),
            _ => bail!("methods pipeline and diffusion-only need --checkpoint and --keys"),
        };
        let (state, sched_cfg) = load_checkpoint(ck)?;
        let keys = read_keys(kp, &cfg.arm)?;
        if state.config.n_keys != keys.len() {
            bail!("{} and {} disagree on the number of key configurations", ck.display(), kp.display());
        }
        Some((Denoiser::new(state.config)?, state, keys, sched_cfg.build()?))
    } else {
        None
    };
    let model = loaded.as_ref().map(|(net, state, keys, sched)| Model {
        net,
        params: &state.params,
        normalizer: &state.normalizer,
        keys,
        sched,
    });
    let mut problems = Vec::new();
    for &level in &cfg.eval.levels {
        problems.push((level, heldout_problems(&cfg.domain, level, cfg.eval.n_problems, &cfg.arm, a.seed)?));
    }
    let s = Settings {
        arm: &cfg.arm,
        sampler: &cfg.sampler,
        guidance: &cfg.guidance,
        trajopt: &cfg.trajopt,
        ground_truth: &cfg.ground_truth,
        eval: &cfg.eval,
    };
    let rows = run_benchmark(&problems, &methods, model.as_ref(), &s, a.seed, cfg.workers())?;
    let table = aggregate(&rows);
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_benchmark_csv(&a.out.join("benchmark.csv"), &table)?;
    write_problem_csv(&a.out.join("problems.csv"), &rows)?;
    for &level in &cfg.eval.levels {
        let p = a.out.join(format!("level{level}.svg"));
        std::fs::write(&p, render_svg(level, &table)).with_context(|| format!("cannot write {}", p.display()))?;
    }
    write_json(&a.out.join("config.json"), &cfg)?;
    for r in &table {
        info!(
            "{} level {} budget {}: success {:.3}, collision {:.4}, penetration {:.4}",
            r.method, r.level, r.budget, r.success_rate, r.collision_rate, r.penetration_depth
        );
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Keyconfig(a) => cmd_keyconfig(a),
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Entry point: parses arguments, runs the command, reports failures as a
/// JSON object on stderr and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let msg = serde_json::json!({ "error": format!("{e:#}"), "causes": chain });
            eprintln!("{msg}");
            1
        }
    }
}
