//! Bidirectional RRT (RRT-Connect style) and path utilities.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PlanningProblem;
use crate::math::dist;
use crate::world::{in_collision, segment_certified_free, segment_free, ArmModel, Configuration, Environment, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtParams {
    pub step_size: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    pub check_resolution: f64,
    /// Wall-clock budget in seconds; only honored by [`birrt_plan_with_clock`].
    pub timeout: Option<f64>,
}

impl Default for RrtParams {
    fn default() -> Self {
        RrtParams {
            step_size: 0.2,
            goal_bias: 0.1,
            max_iterations: 20_000,
            check_resolution: 0.02,
            timeout: None,
        }
    }
}

impl RrtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.check_resolution > 0.0) {
            return Err(Error::invalid("rrt params", "step size and resolution must be positive"));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(Error::invalid("rrt params", "goal bias must be a probability"));
        }
        Ok(())
    }
}

/// Source of elapsed time for planner timeouts.
pub trait Clock {
    fn elapsed_secs(&self) -> f64;
}

/// A clock that never advances; planning is bounded by iterations only.
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_secs(&self) -> f64 {
        0.0
    }
}

/// Variable-length piecewise-linear C-space path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Configuration>,
}

impl Path {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }

    /// Re-checks every segment at `resolution`.
    pub fn is_free(&self, arm: &ArmModel, env: &Environment, resolution: f64) -> bool {
        match self.waypoints.as_slice() {
            [] => true,
            [q] => !in_collision(arm, env, q).unwrap_or(true),
            ws => ws
                .windows(2)
                .all(|w| segment_free(arm, env, &w[0], &w[1], resolution)),
        }
    }
}

struct Tree {
    nodes: Vec<Configuration>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: Configuration) -> Self {
        Tree {
            nodes: alloc::vec![root],
            parent: alloc::vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d: f64 = n.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn push(&mut self, q: Configuration, parent: usize) -> usize {
        self.nodes.push(q);
        self.parent.push(parent);
        self.nodes.len() - 1
    }

    /// Root-to-node configurations.
    fn branch(&self, mut i: usize) -> Vec<Configuration> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i].clone());
            i = self.parent[i];
        }
        out.reverse();
        out
    }
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

fn steer(from: &[f64], to: &[f64], step: f64) -> (Configuration, bool) {
    let d = dist(from, to);
    if d <= step {
        (Configuration::from(to), true)
    } else {
        let s = step / d;
        (
            Configuration(from.iter().zip(to).map(|(a, b)| a + (b - a) * s).collect()),
            false,
        )
    }
}

fn extend(tree: &mut Tree, q: &[f64], arm: &ArmModel, env: &Environment, p: &RrtParams) -> Extend {
    let near = tree.nearest(q);
    let (q_new, reached) = steer(&tree.nodes[near], q, p.step_size);
    if !segment_certified_free(arm, env, &tree.nodes[near], &q_new, p.check_resolution) {
        return Extend::Trapped;
    }
    let id = tree.push(q_new, near);
    if reached {
        Extend::Reached(id)
    } else {
        Extend::Advanced(id)
    }
}

fn connect(tree: &mut Tree, q: &[f64], arm: &ArmModel, env: &Environment, p: &RrtParams) -> Option<usize> {
    loop {
        match extend(tree, q, arm, env, p) {
            Extend::Reached(id) => return Some(id),
            Extend::Advanced(_) => continue,
            Extend::Trapped => return None,
        }
    }
}

fn sample_config<R: Rng + ?Sized>(arm: &ArmModel, rng: &mut R) -> Configuration {
    Configuration(
        arm.joint_limits
            .iter()
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect(),
    )
}

/// Bidirectional RRT bounded by `max_iterations` only.
pub fn birrt_plan<R: Rng + ?Sized>(
    problem: &PlanningProblem,
    arm: &ArmModel,
    params: &RrtParams,
    rng: &mut R,
) -> Result<Path> {
    birrt_plan_with_clock(problem, arm, params, rng, &NoClock)
}

/// Bidirectional RRT with greedy connect. Fails with
/// [`Error::PlanningFailed`] when the iteration budget or timeout runs out.
pub fn birrt_plan_with_clock<R: Rng + ?Sized>(
    problem: &PlanningProblem,
    arm: &ArmModel,
    params: &RrtParams,
    rng: &mut R,
    clock: &dyn Clock,
) -> Result<Path> {
    params.validate()?;
    let env = &problem.env;
    if in_collision(arm, env, &problem.q_s)? || in_collision(arm, env, &problem.q_g)? {
        return Err(Error::InvalidEndpoints);
    }
    if problem.q_s == problem.q_g {
        return Ok(Path {
            waypoints: alloc::vec![problem.q_s.clone()],
        });
    }
    let mut a = Tree::new(problem.q_s.clone());
    let mut b = Tree::new(problem.q_g.clone());
    // `a` is the start tree when this is false
    let mut swapped = false;
    for _ in 0..params.max_iterations {
        if let Some(limit) = params.timeout {
            if clock.elapsed_secs() > limit {
                return Err(Error::PlanningFailed("timeout"));
            }
        }
        let q_rand = if rng.random::<f64>() < params.goal_bias {
            b.nodes[0].clone()
        } else {
            sample_config(arm, rng)
        };
        let new_id = match extend(&mut a, &q_rand, arm, env, params) {
            Extend::Trapped => None,
            Extend::Reached(id) | Extend::Advanced(id) => Some(id),
        };
        if let Some(id) = new_id {
            let target = a.nodes[id].clone();
            if let Some(bid) = connect(&mut b, &target, arm, env, params) {
                let mut first = a.branch(id);
                let mut second = b.branch(bid);
                // the shared meeting configuration appears in both branches
                second.pop();
                second.reverse();
                first.extend(second);
                if swapped {
                    first.reverse();
                }
                return Ok(Path { waypoints: first });
            }
        }
        core::mem::swap(&mut a, &mut b);
        swapped = !swapped;
    }
    Err(Error::PlanningFailed("iteration budget exhausted"))
}

/// Random vertex shortcutting: replaces the stretch between two random
/// waypoints with a straight segment when that segment is free.
pub fn shortcut<R: Rng + ?Sized>(
    path: &Path,
    arm: &ArmModel,
    env: &Environment,
    iterations: usize,
    resolution: f64,
    rng: &mut R,
) -> Path {
    let mut w = path.waypoints.clone();
    for _ in 0..iterations {
        if w.len() < 3 {
            break;
        }
        let i = rng.random_range(0..w.len() - 2);
        let j = rng.random_range(i + 2..w.len());
        if segment_certified_free(arm, env, &w[i], &w[j], resolution) {
            w.drain(i + 1..j);
        }
    }
    Path { waypoints: w }
}

/// Arc-length-uniform resampling to exactly `len` waypoints; endpoints are
/// copied bit-exactly.
pub fn resample_to_horizon(path: &Path, len: usize) -> Result<Trajectory> {
    let ws = &path.waypoints;
    let first = ws.first().ok_or_else(|| Error::invalid("path", "no waypoints"))?;
    if len < 2 {
        return Err(Error::invalid("horizon", "needs at least two waypoints"));
    }
    let d = first.dim();
    let mut cum = Vec::with_capacity(ws.len());
    cum.push(0.0);
    for win in ws.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + dist(&win[0], &win[1]));
    }
    let total = *cum.last().unwrap();
    let mut data = Vec::with_capacity(len * d);
    let mut seg = 0;
    for k in 0..len {
        if k == 0 {
            data.extend_from_slice(first);
            continue;
        }
        if k == len - 1 {
            data.extend_from_slice(ws.last().unwrap());
            continue;
        }
        if total == 0.0 {
            data.extend_from_slice(first);
            continue;
        }
        let s = total * k as f64 / (len - 1) as f64;
        while seg + 1 < ws.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let l = cum[seg + 1] - cum[seg];
        let u = if l > 0.0 { ((s - cum[seg]) / l).clamp(0.0, 1.0) } else { 0.0 };
        for (x, y) in ws[seg].iter().zip(ws[seg + 1].iter()) {
            data.push(x + (y - x) * u);
        }
    }
    Trajectory::from_flat(d, data)
}
