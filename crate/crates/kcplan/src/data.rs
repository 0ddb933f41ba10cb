//! Dataset generation, φ annotation and held-out problem sets.

use anyhow::Result;
use log::{debug, info};
use serde::{Deserialize, Serialize};

use kcplan_core::dataset::{
    generate_environment, generate_record, sample_problem_in, DatasetRecord, GroundTruthConfig, LevelSpec,
    PlanningProblem,
};
use kcplan_core::keyconfig::{env_representation, KeyConfigSet};
use kcplan_core::seed::{rng_for, stream};
use kcplan_core::ArmModel;

use crate::config::DomainConfig;

/// Maps `f` over `0..n` on `workers` threads; results come back in index
/// order, so output never depends on the worker count.
pub fn par_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index computed")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub level: u8,
    pub attempted: usize,
    pub succeeded: usize,
    pub no_problem: usize,
    pub planning_failed: usize,
}

/// One problem on a fresh environment, drawn from the given generator.
pub fn draw_problem<R: rand::Rng + ?Sized>(
    spec: &LevelSpec,
    domain: &DomainConfig,
    arm: &ArmModel,
    env_rng: &mut R,
    problem_rng: &mut R,
) -> Result<PlanningProblem> {
    let env = generate_environment(spec, env_rng);
    let regions = if domain.slot_endpoints { spec.layout.slots() } else { Vec::new() };
    Ok(sample_problem_in(
        &env,
        arm,
        &regions,
        domain.min_separation,
        problem_rng,
        domain.problem_tries,
    )?)
}

/// Attempts `count` records; record `i` uses its own seed streams, so the
/// output is the same for any worker count. Failed attempts are skipped.
pub fn build_dataset(
    domain: &DomainConfig,
    level: u8,
    count: usize,
    arm: &ArmModel,
    gt: &GroundTruthConfig,
    seed: u64,
    workers: usize,
) -> Result<(Vec<DatasetRecord>, DatasetSummary)> {
    let spec = domain.level_spec(level)?;
    let results = par_map(count, workers, |i| {
        let mut env_rng = rng_for(seed, stream::ENVIRONMENT, i as u64);
        let mut prob_rng = rng_for(seed, stream::PROBLEM, i as u64);
        let problem = match draw_problem(&spec, domain, arm, &mut env_rng, &mut prob_rng) {
            Ok(p) => p,
            Err(e) => return Err((true, e.to_string())),
        };
        let mut plan_rng = rng_for(seed, stream::PLANNER, i as u64);
        generate_record(&problem, arm, gt, &mut plan_rng)
            .map(|mut r| {
                r.level = Some(level);
                r
            })
            .map_err(|e| (false, e.to_string()))
    });
    let mut summary = DatasetSummary {
        level,
        attempted: count,
        ..Default::default()
    };
    let mut records = Vec::with_capacity(count);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err((no_problem, msg)) => {
                debug!("record {i} skipped: {msg}");
                if no_problem {
                    summary.no_problem += 1;
                } else {
                    summary.planning_failed += 1;
                }
            }
        }
    }
    summary.succeeded = records.len();
    info!(
        "level {level}: {} of {count} records ({} without a valid problem, {} planning failures)",
        summary.succeeded, summary.no_problem, summary.planning_failed
    );
    Ok((records, summary))
}

/// Recomputes every record's φ; running it twice changes nothing.
pub fn annotate_phi(records: &mut [DatasetRecord], keys: &KeyConfigSet, arm: &ArmModel) -> Result<()> {
    for r in records.iter_mut() {
        r.phi = Some(env_representation(keys, arm, &r.env)?);
    }
    Ok(())
}

/// `n` evaluation problems drawn from a stream no dataset uses.
pub fn heldout_problems(domain: &DomainConfig, level: u8, n: usize, arm: &ArmModel, seed: u64) -> Result<Vec<PlanningProblem>> {
    let spec = domain.level_spec(level)?;
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let key = (level as u64) << 32 | i;
        let mut env_rng = rng_for(seed, stream::HELDOUT, key);
        let mut prob_rng = rng_for(seed, stream::HELDOUT, key ^ (1 << 63));
        if let Ok(p) = draw_problem(&spec, domain, arm, &mut env_rng, &mut prob_rng) {
            out.push(p);
        }
        i += 1;
        if i > 100 * n as u64 + 100 {
            anyhow::bail!("could not draw {n} held-out problems at level {level}");
        }
    }
    Ok(out)
}
