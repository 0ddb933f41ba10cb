//! Hinge collision and smoothness costs with analytic gradients, plus the
//! fixed-iteration descent optimizer used for post-processing.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::world::{
    for_each_pair, interpolate, point_grad_to_joints, ArmModel, Environment, Trajectory, Vec2,
    MAX_LINKS,
};
use crate::{Error, Result};

/// Safety margin of the collision hinge, meters.
pub const D_SAFE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRule {
    /// Initial step size.
    pub learning_rate: f64,
    /// Factor applied to the step size after an accepted step (`> 1` grows it).
    pub decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajOptParams {
    pub d_safe: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub step_rule: StepRule,
    pub n_sub: usize,
}

impl Default for TrajOptParams {
    fn default() -> Self {
        TrajOptParams {
            d_safe: D_SAFE,
            lambda: 2.0,
            iterations: 100,
            step_rule: StepRule {
                learning_rate: 0.05,
                decay: 1.5,
            },
            n_sub: 8,
        }
    }
}

impl TrajOptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_safe >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("trajopt params", "d_safe and lambda must be non-negative"));
        }
        if self.n_sub == 0 {
            return Err(Error::invalid("trajopt params", "n_sub must be at least 1"));
        }
        if !(self.step_rule.learning_rate > 0.0) {
            return Err(Error::invalid("trajopt params", "learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub collision: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// Hinge over every sweep sample of every segment:
/// `Σ_seg Σ_m Σ_pairs max(0, d_safe − sd)`, with `m = 0..=n_sub`.
///
/// When `grad` is given (shape `len × dim`), `weight ·` the gradient is added
/// to it for every waypoint, endpoints included.
pub fn collision_cost_grad(
    arm: &ArmModel,
    env: &Environment,
    tau: &Trajectory,
    d_safe: f64,
    n_sub: usize,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let d = tau.dim();
    debug_assert_eq!(d, arm.dof());
    let n_sub = n_sub.max(1);
    let mut q = [0.0; MAX_LINKS];
    let mut pts = [Vec2::ZERO; MAX_LINKS + 1];
    let mut total = 0.0;
    for t in 0..tau.len() - 1 {
        let (qa, qb) = (tau.row(t), tau.row(t + 1));
        for m in 0..=n_sub {
            let s = m as f64 / n_sub as f64;
            interpolate(qa, qb, s, &mut q[..d]);
            arm.joint_points(&q[..d], &mut pts);
            let mut gp = [Vec2::ZERO; MAX_LINKS + 1];
            let mut active = false;
            for_each_pair(arm, env, &pts, |sd, pg| {
                let h = d_safe - sd;
                if h > 0.0 {
                    total += h;
                    if grad.is_some() {
                        pg.accumulate(&mut gp, -1.0);
                        active = true;
                    }
                }
            });
            if active {
                if let Some((g, w)) = grad.as_mut() {
                    let mut gq = [0.0; MAX_LINKS];
                    point_grad_to_joints(d, &pts, &gp, &mut gq[..d]);
                    let (ga, gb) = g.split_at_mut((t + 1) * d);
                    let ga = &mut ga[t * d..];
                    for j in 0..d {
                        ga[j] += *w * (1.0 - s) * gq[j];
                        gb[j] += *w * s * gq[j];
                    }
                }
            }
        }
    }
    total
}

pub fn collision_cost(
    arm: &ArmModel,
    env: &Environment,
    tau: &Trajectory,
    d_safe: f64,
    n_sub: usize,
) -> f64 {
    collision_cost_grad(arm, env, tau, d_safe, n_sub, None)
}

/// `Σ_t ‖q_t − q_{t−1}‖²`.
pub fn smoothness_cost(tau: &Trajectory) -> f64 {
    smoothness_cost_grad(tau, None)
}

/// Smoothness cost; adds `weight ·` its gradient to `grad` when given.
pub fn smoothness_cost_grad(tau: &Trajectory, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let d = tau.dim();
    let x = tau.as_slice();
    let mut total = 0.0;
    for t in 1..tau.len() {
        for j in 0..d {
            let diff = x[t * d + j] - x[(t - 1) * d + j];
            total += diff * diff;
            if let Some((g, w)) = grad.as_mut() {
                g[t * d + j] += 2.0 * *w * diff;
                g[(t - 1) * d + j] -= 2.0 * *w * diff;
            }
        }
    }
    total
}

pub fn costs(arm: &ArmModel, env: &Environment, tau: &Trajectory, p: &TrajOptParams) -> CostBreakdown {
    let collision = collision_cost(arm, env, tau, p.d_safe, p.n_sub);
    let smoothness = smoothness_cost(tau);
    CostBreakdown {
        collision,
        smoothness,
        total: collision + p.lambda * smoothness,
    }
}

/// Cost and full gradient (every row, endpoints included).
pub fn cost_and_full_gradient(
    arm: &ArmModel,
    env: &Environment,
    tau: &Trajectory,
    p: &TrajOptParams,
) -> (CostBreakdown, Vec<f64>) {
    let mut g = vec![0.0; tau.as_slice().len()];
    let collision = collision_cost_grad(arm, env, tau, p.d_safe, p.n_sub, Some((&mut g, 1.0)));
    let smoothness = smoothness_cost_grad(tau, Some((&mut g, p.lambda)));
    (
        CostBreakdown {
            collision,
            smoothness,
            total: collision + p.lambda * smoothness,
        },
        g,
    )
}

/// Gradient of the total cost with rows `0` and `T − 1` zeroed.
pub fn cost_gradient(arm: &ArmModel, env: &Environment, tau: &Trajectory, p: &TrajOptParams) -> Vec<f64> {
    let (_, mut g) = cost_and_full_gradient(arm, env, tau, p);
    zero_endpoint_rows(&mut g, tau.dim());
    g
}

pub(crate) fn zero_endpoint_rows(g: &mut [f64], d: usize) {
    let n = g.len();
    g[..d].iter_mut().for_each(|v| *v = 0.0);
    g[n - d..].iter_mut().for_each(|v| *v = 0.0);
}

const MAX_HALVINGS: usize = 8;

/// Runs exactly `p.iterations` descent steps with backtracking.
///
/// Each iteration tries the current step size and halves it (at most eight
/// times) until the total cost does not increase; if no trial is accepted the
/// iterate is left unchanged and the next iteration starts from the smallest
/// step tried. The trace holds the accepted cost after every iteration.
pub fn optimize(
    seed: &Trajectory,
    arm: &ArmModel,
    env: &Environment,
    p: &TrajOptParams,
) -> (Trajectory, Vec<CostBreakdown>) {
    let mut trace = Vec::with_capacity(p.iterations);
    let mut snaps = optimize_snapshots(seed, arm, env, p, &[p.iterations], Some(&mut trace));
    (snaps.pop().expect("one snapshot"), trace)
}

/// Like [`optimize`] but returns the iterate after each iteration count in
/// `checkpoints` (ascending), running `max(checkpoints)` iterations once.
/// The iterate at `k` equals `optimize` with `iterations = k`.
pub fn optimize_snapshots(
    seed: &Trajectory,
    arm: &ArmModel,
    env: &Environment,
    p: &TrajOptParams,
    checkpoints: &[usize],
    mut trace: Option<&mut Vec<CostBreakdown>>,
) -> Vec<Trajectory> {
    debug_assert!(checkpoints.windows(2).all(|w| w[0] <= w[1]));
    let total = checkpoints.last().copied().unwrap_or(0);
    let mut tau = seed.clone();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let mut snap = |k: usize, tau: &Trajectory, out: &mut Vec<Trajectory>| {
        while next < checkpoints.len() && checkpoints[next] == k {
            out.push(tau.clone());
            next += 1;
        }
    };
    snap(0, &tau, &mut out);
    if total == 0 {
        return out;
    }
    let d = tau.dim();
    let (mut cur, mut g) = cost_and_full_gradient(arm, env, &tau, p);
    zero_endpoint_rows(&mut g, d);
    let mut step = p.step_rule.learning_rate;
    let mut trial = tau.clone();
    for k in 1..=total {
        if g.iter().any(|v| *v != 0.0) {
            for _ in 0..=MAX_HALVINGS {
                for ((x, t), gv) in tau.as_slice().iter().zip(trial.as_mut_slice()).zip(&g) {
                    *t = x - step * gv;
                }
                let (c, mut gn) = cost_and_full_gradient(arm, env, &trial, p);
                if c.total <= cur.total {
                    core::mem::swap(&mut tau, &mut trial);
                    zero_endpoint_rows(&mut gn, d);
                    cur = c;
                    g = gn;
                    step *= p.step_rule.decay;
                    break;
                }
                step *= 0.5;
            }
        }
        if let Some(t) = trace.as_mut() {
            t.push(cur);
        }
        snap(k, &tau, &mut out);
    }
    out
}

/// `count` seeds from `q_s` to `q_g`: the straight line first, then straight
/// lines bent by a random half-sine bump per joint of standard deviation
/// `scale` radians (zero at both endpoints).
pub fn straight_line_seeds<R: rand::Rng + ?Sized>(
    q_s: &[f64],
    q_g: &[f64],
    len: usize,
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    use rand_distr::{Distribution, StandardNormal};
    let base = Trajectory::straight(q_s, q_g, len)?;
    let d = base.dim();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut tau = base.clone();
        if i > 0 {
            let amp: Vec<f64> = (0..d)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            for t in 1..len - 1 {
                let bump = crate::math::sin(core::f64::consts::PI * t as f64 / (len - 1) as f64);
                for (x, a) in tau.row_mut(t).iter_mut().zip(&amp) {
                    *x += a * bump;
                }
            }
        }
        out.push(tau);
    }
    Ok(out)
}
