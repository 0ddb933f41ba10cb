//! Method runners and the benchmark harness.
//!
//! Method ids:
//!
//! - `pipeline`: φ → batched guided sampling → `k` optimizer iterations on
//!   every candidate → best candidate.
//! - `diffusion-only`: the same samples without optimization (`k = 0`).
//! - `trajopt`: the straight line plus perturbed straight lines, optimized for
//!   `k` iterations, best candidate.
//! - `birrt`: bidirectional RRT with an iteration budget, shortcut and
//!   resampled to the horizon; falls back to the straight line on failure.
//! - `straight`: the straight line itself.
//!
//! Every method draws from its own per-problem seed stream, so methods share
//! problems but not noise.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kcplan_core::dataset::{GroundTruthConfig, Normalizer, PlanningProblem};
use kcplan_core::denoiser::{BoundModel, Denoiser};
use kcplan_core::diffusion::{
    best_trajectory, sample_batch, GuidanceContext, GuidanceParams, NoiseSchedule, SamplerConfig,
};
use kcplan_core::keyconfig::{env_representation, KeyConfigSet};
use kcplan_core::metrics::{evaluate_trajectory, TrajectoryMetrics};
use kcplan_core::planners::{birrt_plan, resample_to_horizon, shortcut, RrtParams};
use kcplan_core::seed::{rng_for, stream};
use kcplan_core::trajopt::{optimize, optimize_snapshots, straight_line_seeds, TrajOptParams};
use kcplan_core::{ArmModel, Trajectory};

use crate::config::EvalConfig;
use crate::data::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Pipeline,
    DiffusionOnly,
    TrajOpt,
    Birrt,
    Straight,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pipeline,
        Method::DiffusionOnly,
        Method::TrajOpt,
        Method::Birrt,
        Method::Straight,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Pipeline => "pipeline",
            Method::DiffusionOnly => "diffusion-only",
            Method::TrajOpt => "trajopt",
            Method::Birrt => "birrt",
            Method::Straight => "straight",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Pipeline | Method::DiffusionOnly)
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .with_context(|| format!("unknown method {s:?}"))
    }
}

/// A trained model with everything needed to condition and sample it.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub net: &'a Denoiser,
    pub params: &'a [f64],
    pub normalizer: &'a Normalizer,
    pub keys: &'a KeyConfigSet,
    pub sched: &'a NoiseSchedule,
}

#[derive(Clone, Copy)]
pub struct Settings<'a> {
    pub arm: &'a ArmModel,
    pub sampler: &'a SamplerConfig,
    pub guidance: &'a GuidanceParams,
    pub trajopt: &'a TrajOptParams,
    pub ground_truth: &'a GroundTruthConfig,
    pub eval: &'a EvalConfig,
}

/// Result of one method at one budget on one problem.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub budget: usize,
    pub tau: Trajectory,
    pub metrics: TrajectoryMetrics,
    pub sampling_ms: f64,
    pub opt_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Raw denoised candidates for one problem, plus the time spent computing φ
/// and sampling.
pub fn sample_candidates(
    problem: &PlanningProblem,
    model: &Model<'_>,
    s: &Settings<'_>,
    rng_key: u64,
    master: u64,
) -> Result<(Vec<Trajectory>, f64)> {
    let t0 = Instant::now();
    let phi = env_representation(model.keys, s.arm, &problem.env)?;
    let bound = BoundModel {
        net: model.net,
        params: model.params,
    };
    let guidance = s.guidance.enabled.then_some(GuidanceContext {
        params: s.guidance,
        arm: s.arm,
        env: &problem.env,
    });
    let mut rng = rng_for(master, stream::SAMPLING, rng_key);
    let cands = sample_batch(
        &bound,
        model.sched,
        s.sampler,
        problem,
        &phi,
        model.normalizer,
        guidance,
        &mut rng,
        &mut |_, _, _| {},
    )?;
    Ok((cands, ms(t0)))
}

/// Optimizes every candidate to each budget and keeps the best one per budget.
fn optimize_and_select(
    cands: &[Trajectory],
    problem: &PlanningProblem,
    s: &Settings<'_>,
    budgets: &[usize],
    sampling_ms: f64,
) -> Result<Vec<Outcome>> {
    let mut sorted = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut per_budget: Vec<(Vec<Trajectory>, f64)> = vec![(Vec::new(), 0.0); sorted.len()];
    if s.eval.timings {
        for (j, &k) in sorted.iter().enumerate() {
            let p = TrajOptParams { iterations: k, ..*s.trajopt };
            let t0 = Instant::now();
            per_budget[j].0 = cands.iter().map(|c| optimize(c, s.arm, &problem.env, &p).0).collect();
            per_budget[j].1 = ms(t0);
        }
    } else {
        for c in cands {
            let snaps = optimize_snapshots(c, s.arm, &problem.env, s.trajopt, &sorted, None);
            for (j, tau) in snaps.into_iter().enumerate() {
                per_budget[j].0.push(tau);
            }
        }
    }
    let mut out = Vec::with_capacity(budgets.len());
    for &k in budgets {
        let j = sorted.binary_search(&k).expect("budget is in the sorted list");
        let (taus, opt_ms) = &per_budget[j];
        let best = best_trajectory(taus, s.arm, &problem.env, s.trajopt)?;
        let tau = taus[best].clone();
        out.push(Outcome {
            budget: k,
            metrics: evaluate_trajectory(s.arm, &problem.env, &tau)?,
            tau,
            sampling_ms: if s.eval.timings { sampling_ms } else { 0.0 },
            opt_ms: if s.eval.timings { *opt_ms } else { 0.0 },
        });
    }
    Ok(out)
}

fn birrt_outcome(problem: &PlanningProblem, s: &Settings<'_>, budget: usize, rng_key: u64, master: u64) -> Result<Outcome> {
    let t0 = Instant::now();
    let params = RrtParams {
        max_iterations: budget,
        timeout: None,
        ..s.ground_truth.rrt
    };
    let mut rng = rng_for(master, stream::PLANNER, rng_key);
    let horizon = s.ground_truth.horizon;
    let tau = match birrt_plan(problem, s.arm, &params, &mut rng) {
        Ok(path) => {
            let path = shortcut(
                &path,
                s.arm,
                &problem.env,
                s.ground_truth.shortcut_iterations,
                params.check_resolution,
                &mut rng,
            );
            resample_to_horizon(&path, horizon)?
        }
        Err(_) => Trajectory::straight(&problem.q_s, &problem.q_g, horizon)?,
    };
    let elapsed = ms(t0);
    Ok(Outcome {
        budget,
        metrics: evaluate_trajectory(s.arm, &problem.env, &tau)?,
        tau,
        sampling_ms: 0.0,
        opt_ms: if s.eval.timings { elapsed } else { 0.0 },
    })
}

/// Runs every requested method on one problem. `rng_key` identifies the
/// problem within the benchmark.
pub fn run_problem(
    problem: &PlanningProblem,
    methods: &[Method],
    model: Option<&Model<'_>>,
    s: &Settings<'_>,
    rng_key: u64,
    master: u64,
) -> Result<Vec<(Method, Vec<Outcome>)>> {
    let horizon = s.ground_truth.horizon;
    let mut samples: Option<(Vec<Trajectory>, f64)> = None;
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let outcomes = match m {
            Method::Pipeline | Method::DiffusionOnly => {
                let model = model.with_context(|| format!("method {} needs a trained model", m.id()))?;
                if samples.is_none() {
                    samples = Some(sample_candidates(problem, model, s, rng_key, master)?);
                }
                let (cands, sms) = samples.as_ref().expect("just sampled");
                let budgets: &[usize] = if m == Method::Pipeline { &s.eval.budgets } else { &[0] };
                optimize_and_select(cands, problem, s, budgets, *sms)?
            }
            Method::TrajOpt => {
                let mut rng = rng_for(master, stream::TRAJOPT_SEEDS, rng_key);
                let seeds = straight_line_seeds(
                    &problem.q_s,
                    &problem.q_g,
                    horizon,
                    s.sampler.batch_size,
                    s.eval.seed_scale,
                    &mut rng,
                )?;
                optimize_and_select(&seeds, problem, s, &s.eval.budgets, 0.0)?
            }
            Method::Birrt => s
                .eval
                .birrt_budgets
                .iter()
                .map(|&b| birrt_outcome(problem, s, b, rng_key, master))
                .collect::<Result<_>>()?,
            Method::Straight => {
                let tau = Trajectory::straight(&problem.q_s, &problem.q_g, horizon)?;
                vec![Outcome {
                    budget: 0,
                    metrics: evaluate_trajectory(s.arm, &problem.env, &tau)?,
                    tau,
                    sampling_ms: 0.0,
                    opt_ms: 0.0,
                }]
            }
        };
        out.push((m, outcomes));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemRow {
    pub method: String,
    pub level: u8,
    pub budget: usize,
    pub problem: usize,
    pub success: bool,
    pub collision_rate: f64,
    pub penetration_depth: f64,
    pub sampling_ms: f64,
    pub opt_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub level: u8,
    pub budget: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub penetration_depth: f64,
    pub n: usize,
    pub sampling_ms: f64,
    pub opt_ms: f64,
    /// Mean penetration over failed problems only (0 when none failed).
    pub penetration_depth_failures: f64,
}

/// Evaluates `methods` on each level's problem list. Problems run on
/// `workers` threads; rows are ordered by level, problem, method, budget.
pub fn run_benchmark(
    problems: &[(u8, Vec<PlanningProblem>)],
    methods: &[Method],
    model: Option<&Model<'_>>,
    s: &Settings<'_>,
    master: u64,
    workers: usize,
) -> Result<Vec<ProblemRow>> {
    if methods.iter().any(|m| m.needs_model()) && model.is_none() {
        bail!("methods pipeline and diffusion-only need a checkpoint and key configurations");
    }
    let mut rows = Vec::new();
    for (level, list) in problems {
        let results = par_map(list.len(), workers, |i| {
            let key = (*level as u64) << 32 | i as u64;
            run_problem(&list[i], methods, model, s, key, master)
        });
        for (i, r) in results.into_iter().enumerate() {
            for (m, outcomes) in r.with_context(|| format!("level {level}, problem {i}"))? {
                for o in outcomes {
                    rows.push(ProblemRow {
                        method: m.id().to_string(),
                        level: *level,
                        budget: o.budget,
                        problem: i,
                        success: o.metrics.success,
                        collision_rate: o.metrics.collision_rate,
                        penetration_depth: o.metrics.penetration_depth,
                        sampling_ms: o.sampling_ms,
                        opt_ms: o.opt_ms,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Means per `(method, level, budget)`, in order of first appearance.
pub fn aggregate(rows: &[ProblemRow]) -> Vec<BenchmarkRow> {
    let mut keys: Vec<(String, u8, usize)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.level, r.budget);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, level, budget)| {
            let group: Vec<&ProblemRow> = rows
                .iter()
                .filter(|r| r.method == method && r.level == level && r.budget == budget)
                .collect();
            let n = group.len();
            let mean = |f: &dyn Fn(&ProblemRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n as f64;
            let failures: Vec<f64> = group.iter().filter(|r| !r.success).map(|r| r.penetration_depth).collect();
            BenchmarkRow {
                success_rate: mean(&|r| if r.success { 1.0 } else { 0.0 }),
                collision_rate: mean(&|r| r.collision_rate),
                penetration_depth: mean(&|r| r.penetration_depth),
                n,
                sampling_ms: mean(&|r| r.sampling_ms),
                opt_ms: mean(&|r| r.opt_ms),
                penetration_depth_failures: if failures.is_empty() {
                    0.0
                } else {
                    failures.iter().sum::<f64>() / failures.len() as f64
                },
                method,
                level,
                budget,
            }
        })
        .collect()
}

pub fn write_benchmark_csv(path: &Path, rows: &[BenchmarkRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(crate::io::create(path)?);
    w.write_record([
        "method",
        "level",
        "budget",
        "success_rate",
        "collision_rate",
        "penetration_depth",
        "n",
        "sampling_ms",
        "opt_ms",
        "penetration_depth_failures",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.level.to_string(),
            r.budget.to_string(),
            r.success_rate.to_string(),
            r.collision_rate.to_string(),
            r.penetration_depth.to_string(),
            r.n.to_string(),
            r.sampling_ms.to_string(),
            r.opt_ms.to_string(),
            r.penetration_depth_failures.to_string(),
        ])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_problem_csv(path: &Path, rows: &[ProblemRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(crate::io::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_benchmark_csv(path: &Path) -> Result<Vec<BenchmarkRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse {}", path.display()))
}

const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f"];

/// Success rate against budget for one level. Optimizer iterations and
/// planner iterations get separate panels since their units differ.
pub fn render_svg(level: u8, rows: &[BenchmarkRow]) -> String {
    let rows: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.level == level).collect();
    let (pw, ph, m) = (360.0, 260.0, 50.0);
    let width = 2.0 * (pw + m) + m;
    let height = ph + 2.0 * m + 40.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Level {level}: success rate vs budget</text>"#,
        width / 2.0
    );
    let panels: [(&str, Vec<&BenchmarkRow>); 2] = [
        (
            "optimizer iterations",
            rows.iter().copied().filter(|r| r.method != "birrt").collect(),
        ),
        (
            "planner iterations",
            rows.iter().copied().filter(|r| r.method == "birrt").collect(),
        ),
    ];
    for (p, (xlabel, prow)) in panels.iter().enumerate() {
        let x0 = m + p as f64 * (pw + m);
        let y0 = m;
        let _ = write!(
            svg,
            r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
            x0 + pw / 2.0,
            y0 + ph + 32.0
        );
        for tick in 0..=4 {
            let v = tick as f64 / 4.0;
            let y = y0 + ph * (1.0 - v);
            let _ = write!(
                svg,
                r##"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
                x0 + pw,
                x0 - 4.0,
                y + 4.0,
                v
            );
        }
        let xmax = prow.iter().map(|r| r.budget).max().unwrap_or(1).max(1) as f64;
        let sx = |b: usize| x0 + pw * b as f64 / xmax;
        let mut budgets: Vec<usize> = prow.iter().map(|r| r.budget).collect();
        budgets.sort_unstable();
        budgets.dedup();
        for b in &budgets {
            let _ = write!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{b}</text>"#,
                sx(*b),
                y0 + ph + 16.0
            );
        }
        let mut methods: Vec<&str> = Vec::new();
        for r in prow {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        for (mi, name) in methods.iter().enumerate() {
            let color = COLORS[Method::from_str(name).map(|m| m as usize).unwrap_or(mi) % COLORS.len()];
            let pts: Vec<(f64, f64)> = prow
                .iter()
                .filter(|r| r.method == *name)
                .map(|r| (sx(r.budget), y0 + ph * (1.0 - r.success_rate)))
                .collect();
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for (x, y) in &pts {
                let _ = write!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            }
            let ly = y0 + 16.0 + 16.0 * mi as f64;
            let _ = write!(
                svg,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
                x0 + pw - 130.0,
                ly - 4.0,
                x0 + pw - 110.0,
                ly - 4.0,
                x0 + pw - 104.0,
                ly
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
