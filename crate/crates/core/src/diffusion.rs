//! Noise schedules, v-prediction algebra, DDIM sampling with endpoint
//! constraints, cost guidance, and batched generation.
//!
//! All arrays here are flat row-major `T × d` trajectories in normalized
//! joint coordinates unless a function says otherwise.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, PlanningProblem};
use crate::keyconfig::EnvRepresentation;
use crate::math::{cos, exp, sqrt};
use crate::trajopt::{collision_cost_grad, costs, smoothness_cost_grad, TrajOptParams};
use crate::world::{in_collision, ArmModel, Environment, Trajectory};
use crate::{Error, Result};

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// `alpha_bar[t]` for `t = 0..=N`, with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn n_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.n_train_steps() {
            return Err(Error::invalid("diffusion step", "beyond the schedule length"));
        }
        Ok(())
    }
}

/// Unclipped cosine curve `cos²(((t/N) + s)/(1 + s) · π/2)`, normalized so the
/// value at `t = 0` is one.
pub fn cosine_alpha_bar(t: usize, n: usize) -> f64 {
    let f = |t: usize| {
        let c = cos((t as f64 / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0);
        c * c
    };
    f(t) / f(0)
}

pub fn make_schedule(kind: ScheduleKind, n: usize) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::invalid("noise schedule", "N must be at least 1"));
    }
    let mut alpha_bar = Vec::with_capacity(n + 1);
    alpha_bar.push(1.0);
    match kind {
        ScheduleKind::Cosine => {
            for t in 1..=n {
                let prev = alpha_bar[t - 1];
                let a = cosine_alpha_bar(t, n).max(prev * (1.0 - MAX_BETA));
                alpha_bar.push(a.min(prev));
            }
        }
        ScheduleKind::Linear => {
            // Endpoints of the classic 1000-step schedule, rescaled to N steps.
            let scale = 1000.0 / n as f64;
            let (b0, b1) = (scale * 1e-4, scale * 0.02);
            for t in 1..=n {
                let frac = if n == 1 { 0.0 } else { (t - 1) as f64 / (n - 1) as f64 };
                let beta = (b0 + (b1 - b0) * frac).min(MAX_BETA);
                let prev = alpha_bar[t - 1];
                alpha_bar.push(prev * (1.0 - beta));
            }
        }
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

/// `√ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let (sa, sb) = (sqrt(a), sqrt(1.0 - a));
    x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()
}

/// `√ᾱ_t ε − √(1 − ᾱ_t) x0`.
pub fn v_target(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let (sa, sb) = (sqrt(a), sqrt(1.0 - a));
    x0.iter().zip(eps).map(|(x, e)| sa * e - sb * x).collect()
}

/// `√ᾱ_t x_t − √(1 − ᾱ_t) v`.
pub fn x0_from_v(x_t: &[f64], v: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let (sa, sb) = (sqrt(a), sqrt(1.0 - a));
    x_t.iter().zip(v).map(|(x, v)| sa * x - sb * v).collect()
}

/// `√(1 − ᾱ_t) x_t + √ᾱ_t v`.
pub fn eps_from_v(x_t: &[f64], v: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let (sa, sb) = (sqrt(a), sqrt(1.0 - a));
    x_t.iter().zip(v).map(|(x, v)| sb * x + sa * v).collect()
}

/// DDIM update from a clean estimate and a noise estimate.
pub fn ddim_update<R: Rng + ?Sized>(
    x0_hat: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::invalid("ddim step", "t_prev must be smaller than t"));
    }
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = if eta > 0.0 && a_t < 1.0 {
        eta * sqrt((1.0 - a_p) / (1.0 - a_t)) * sqrt((1.0 - a_t / a_p).max(0.0))
    } else {
        0.0
    };
    let dir = sqrt((1.0 - a_p - sigma * sigma).max(0.0));
    let sa = sqrt(a_p);
    let mut out: Vec<f64> = x0_hat.iter().zip(eps_hat).map(|(x, e)| sa * x + dir * e).collect();
    if sigma > 0.0 {
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *o += sigma * z;
        }
    }
    Ok(out)
}

/// One DDIM step `t → t_prev` driven by a velocity prediction.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    v_pred: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let x0 = x0_from_v(x_t, v_pred, t, sched);
    let eps = eps_from_v(x_t, v_pred, t, sched);
    ddim_update(&x0, &eps, t, t_prev, eta, sched, rng)
}

/// Descending inference steps `N = t_0 > t_1 > … > t_{n−1} ≥ 1`; the final
/// step always goes to `0`.
pub fn inference_steps(n_train: usize, n_infer: usize) -> Vec<usize> {
    let n_infer = n_infer.clamp(1, n_train);
    let mut steps: Vec<usize> = (1..=n_infer)
        .rev()
        .map(|i| ((i * n_train) as f64 / n_infer as f64) as usize)
        .map(|t| t.max(1))
        .collect();
    steps.dedup();
    steps
}

/// Overwrites the first and last rows.
pub fn apply_endpoint_constraint(tau: &mut Trajectory, q_s: &[f64], q_g: &[f64]) {
    let n = tau.len();
    tau.row_mut(0).copy_from_slice(q_s);
    tau.row_mut(n - 1).copy_from_slice(q_g);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceParams {
    /// Gaussian smoothing width, in waypoints.
    pub kernel_sigma: f64,
    /// Collision cost is `max(0, d_max − sd)` per pair and sweep sample.
    pub d_max: f64,
    pub k_smooth: f64,
    pub k_coll: f64,
    /// Per-component clamp of the applied gradient.
    pub g_max: f64,
    pub steps_per_iteration: usize,
    pub enabled: bool,
    /// Sweep samples per segment for the collision cost.
    pub n_sub: usize,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            kernel_sigma: 4.0,
            d_max: 0.1,
            k_smooth: 1e-9,
            k_coll: 1e-2,
            g_max: 1.0,
            steps_per_iteration: 1,
            enabled: true,
            n_sub: 4,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_smooth >= 0.0 && self.k_coll >= 0.0 && self.d_max >= 0.0) {
            return Err(Error::invalid("guidance", "weights and d_max must be non-negative"));
        }
        if !(self.g_max > 0.0) || !(self.kernel_sigma > 0.0) || self.n_sub == 0 {
            return Err(Error::invalid("guidance", "g_max, kernel_sigma and n_sub must be positive"));
        }
        Ok(())
    }
}

/// Row-normalized Gaussian weights truncated at `3σ`: `w[t][s]`, dense `T × T`.
fn smoothing_matrix(len: usize, sigma: f64) -> Vec<f64> {
    let reach = (3.0 * sigma).ceil() as isize;
    let mut w = vec![0.0; len * len];
    for t in 0..len {
        let lo = (t as isize - reach).max(0) as usize;
        let hi = ((t as isize + reach) as usize).min(len - 1);
        let mut total = 0.0;
        for s in lo..=hi {
            let d = s as f64 - t as f64;
            let v = exp(-0.5 * d * d / (sigma * sigma));
            w[t * len + s] = v;
            total += v;
        }
        for s in lo..=hi {
            w[t * len + s] /= total;
        }
    }
    w
}

/// Guidance cost `k_smooth·c_smooth + k_coll·c_coll` of the smoothed,
/// denormalized trajectory, and its unclamped gradient with respect to the
/// normalized input (every row included).
pub fn guidance_cost_grad(
    tau: &Trajectory,
    arm: &ArmModel,
    env: &Environment,
    gp: &GuidanceParams,
    normalizer: &Normalizer,
) -> (f64, Vec<f64>) {
    let (n, d) = (tau.len(), tau.dim());
    let w = smoothing_matrix(n, gp.kernel_sigma);
    let y = normalizer.denormalize(tau);
    let mut z = Trajectory::from_flat(d, vec![0.0; n * d]).expect("shape");
    crate::math::matmul_acc(&w, y.as_slice(), z.as_mut_slice(), n, n, d);
    let mut gz = vec![0.0; n * d];
    let coll = collision_cost_grad(arm, env, &z, gp.d_max, gp.n_sub, Some((&mut gz, gp.k_coll)));
    let smooth = smoothness_cost_grad(&z, Some((&mut gz, gp.k_smooth)));
    let mut gy = vec![0.0; n * d];
    crate::math::matmul_tn_acc(&w, &gz, &mut gy, n, n, d);
    for row in gy.chunks_mut(d) {
        for (g, h) in row.iter_mut().zip(&normalizer.half_range) {
            *g *= h;
        }
    }
    (gp.k_coll * coll + gp.k_smooth * smooth, gy)
}

/// Clamped guidance gradient with endpoint rows zeroed; the sampler subtracts
/// it from the trajectory.
pub fn guidance_gradient(
    tau: &Trajectory,
    arm: &ArmModel,
    env: &Environment,
    gp: &GuidanceParams,
    normalizer: &Normalizer,
) -> Vec<f64> {
    let d = tau.dim();
    if !gp.enabled {
        return vec![0.0; tau.as_slice().len()];
    }
    let (_, mut g) = guidance_cost_grad(tau, arm, env, gp, normalizer);
    for v in g.iter_mut() {
        *v = v.clamp(-gp.g_max, gp.g_max);
    }
    crate::trajopt::zero_endpoint_rows(&mut g, d);
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_infer_steps: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Clip the clean estimate to the normalized joint range at every step.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_infer_steps: 32,
            eta: 0.0,
            batch_size: 8,
            clip_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.n_infer_steps == 0 || self.n_infer_steps > sched.n_train_steps() {
            return Err(Error::invalid("sampler", "n_infer_steps must lie in 1..=N"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("sampler", "eta must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("sampler", "batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Conditioning shared by every element of a batch; `q_s`, `q_g` normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub phi: Vec<f64>,
    pub q_s: Vec<f64>,
    pub q_g: Vec<f64>,
}

/// A network predicting `v` from a noisy normalized trajectory.
pub trait VelocityModel {
    fn horizon(&self) -> usize;
    fn dof(&self) -> usize;
    /// `time` is the diffusion step divided by `N`.
    fn predict(&self, x_t: &[f64], time: f64, cond: &Conditioning) -> Vec<f64>;
}

/// Guidance inputs; without them sampling is unguided.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceContext<'a> {
    pub params: &'a GuidanceParams,
    pub arm: &'a ArmModel,
    pub env: &'a Environment,
}

/// Batched reverse process.
///
/// Each element draws its own sub-seed from `rng`, starts from Gaussian noise
/// and runs `n_infer_steps` DDIM iterations; guidance (when given) and the
/// endpoint constraint are applied after every iteration. `observer` sees each
/// element after every iteration as `(element, iteration, normalized τ)`.
/// Returned trajectories are denormalized with endpoints equal to the problem's
/// `q_s` and `q_g` exactly.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    problem: &PlanningProblem,
    phi: &EnvRepresentation,
    normalizer: &Normalizer,
    guidance: Option<GuidanceContext<'_>>,
    rng: &mut R,
    observer: &mut dyn FnMut(usize, usize, &Trajectory),
) -> Result<Vec<Trajectory>> {
    cfg.validate(sched)?;
    let (len, d) = (model.horizon(), model.dof());
    if problem.q_s.len() != d || problem.q_g.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: problem.q_s.len(),
        });
    }
    if let Some(g) = guidance {
        g.params.validate()?;
    }
    let cond = Conditioning {
        phi: phi.as_f64(),
        q_s: normalizer.normalize_config(&problem.q_s),
        q_g: normalizer.normalize_config(&problem.q_g),
    };
    let steps = inference_steps(sched.n_train_steps(), cfg.n_infer_steps);
    let n = sched.n_train_steps() as f64;
    let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| rng.random()).collect();
    let mut out = Vec::with_capacity(cfg.batch_size);
    for (b, seed) in seeds.into_iter().enumerate() {
        let mut erng = crate::seed::Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..len * d).map(|_| StandardNormal.sample(&mut erng)).collect();
        let mut x = Trajectory::from_flat(d, noise)?;
        apply_endpoint_constraint(&mut x, &cond.q_s, &cond.q_g);
        for (i, &t) in steps.iter().enumerate() {
            let t_prev = steps.get(i + 1).copied().unwrap_or(0);
            let v = model.predict(x.as_slice(), t as f64 / n, &cond);
            let mut x0 = x0_from_v(x.as_slice(), &v, t, sched);
            let eps = if cfg.clip_x0 {
                x0.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                let a = sched.alpha_bar(t);
                let (sa, sb) = (sqrt(a), sqrt(1.0 - a));
                x.as_slice().iter().zip(&x0).map(|(xt, x0)| (xt - sa * x0) / sb).collect()
            } else {
                eps_from_v(x.as_slice(), &v, t, sched)
            };
            x = Trajectory::from_flat(d, ddim_update(&x0, &eps, t, t_prev, cfg.eta, sched, &mut erng)?)?;
            if let Some(g) = guidance.filter(|g| g.params.enabled) {
                for _ in 0..g.params.steps_per_iteration {
                    let grad = guidance_gradient(&x, g.arm, g.env, g.params, normalizer);
                    for (xv, gv) in x.as_mut_slice().iter_mut().zip(&grad) {
                        *xv -= gv;
                    }
                }
            }
            apply_endpoint_constraint(&mut x, &cond.q_s, &cond.q_g);
            assert!(
                x.first() == cond.q_s.as_slice() && x.last() == cond.q_g.as_slice(),
                "endpoint constraint violated"
            );
            observer(b, i, &x);
        }
        if cfg.clip_x0 {
            x.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        let mut tau = normalizer.denormalize(&x);
        apply_endpoint_constraint(&mut tau, &problem.q_s, &problem.q_g);
        out.push(tau);
    }
    Ok(out)
}

/// Number of waypoints of `tau` in collision.
pub fn colliding_waypoint_count(arm: &ArmModel, env: &Environment, tau: &Trajectory) -> Result<usize> {
    let mut n = 0;
    for q in tau.rows() {
        if in_collision(arm, env, q)? {
            n += 1;
        }
    }
    Ok(n)
}

/// Index of the candidate with the fewest colliding waypoints; ties go to the
/// lower total cost under `p`, then to the lower index.
pub fn best_trajectory(
    candidates: &[Trajectory],
    arm: &ArmModel,
    env: &Environment,
    p: &TrajOptParams,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "no trajectories to choose from"));
    }
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, tau) in candidates.iter().enumerate() {
        let count = colliding_waypoint_count(arm, env, tau)?;
        let cost = costs(arm, env, tau, p).total;
        let better = match best {
            None => true,
            Some((bc, bcost, _)) => count < bc || (count == bc && cost < bcost),
        };
        if better {
            best = Some((count, cost, i));
        }
    }
    Ok(best.map(|b| b.2).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Aabb, Obstacle, Vec2};
    use alloc::collections::BTreeSet;

    fn rng(seed: u64) -> crate::seed::Rng {
        crate::seed::Rng::seed_from_u64(seed)
    }

    fn normal_vec(r: &mut crate::seed::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut *r)).collect()
    }

    #[test]
    fn schedules_start_at_one_and_decrease() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = make_schedule(kind, 1000).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar[1000] > 0.0 && s.alpha_bar[1000] < 1e-2);
        }
        assert!(make_schedule(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn cosine_matches_formula() {
        let s = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let f = |t: f64| {
            let c = libm::cos((t / 100.0 + 0.008) / 1.008 * core::f64::consts::FRAC_PI_2);
            c * c
        };
        for t in [1usize, 13, 50, 77, 98] {
            let expect = f(t as f64) / f(0.0);
            assert!((s.alpha_bar[t] - expect).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn forward_and_velocity_limits() {
        let s = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let x0 = [0.3, -0.2, 0.9];
        let eps = [1.0, 0.5, -0.4];
        assert_eq!(q_sample(&x0, &eps, 0, &s), x0.to_vec());
        assert_eq!(v_target(&x0, &eps, 0, &s), eps.to_vec());
        let mut s0 = s.clone();
        s0.alpha_bar[50] = 0.0;
        assert_eq!(q_sample(&x0, &eps, 50, &s0), eps.to_vec());
        assert_eq!(v_target(&x0, &eps, 50, &s0), vec![-0.3, 0.2, -0.9]);
    }

    #[test]
    fn ddim_terminal_step_recovers_clean_sample() {
        let s = make_schedule(ScheduleKind::Cosine, 64).unwrap();
        let mut r = rng(3);
        let x0 = normal_vec(&mut r, 12);
        let eps = normal_vec(&mut r, 12);
        let xt = q_sample(&x0, &eps, 20, &s);
        let v = v_target(&x0, &eps, 20, &s);
        let out = ddim_step(&xt, &v, 20, 0, 0.0, &s, &mut r).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ddim_step(&xt, &v, 20, 20, 0.0, &s, &mut r).is_err());
    }

    #[test]
    fn inference_steps_descend_to_one() {
        assert_eq!(inference_steps(256, 4), vec![256, 192, 128, 64]);
        let st = inference_steps(10, 32);
        assert_eq!(st, (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(inference_steps(5, 1), vec![5]);
    }

    #[test]
    fn endpoint_constraint_replaces_two_rows() {
        let mut tau = Trajectory::from_flat(2, (0..10).map(|v| v as f64).collect()).unwrap();
        let orig = tau.clone();
        apply_endpoint_constraint(&mut tau, &[-1.0, -1.0], &[9.5, 9.5]);
        assert_eq!(tau.first(), &[-1.0, -1.0]);
        assert_eq!(tau.last(), &[9.5, 9.5]);
        for t in 1..4 {
            assert_eq!(tau.row(t), orig.row(t));
        }
        let once = tau.clone();
        apply_endpoint_constraint(&mut tau, &[-1.0, -1.0], &[9.5, 9.5]);
        assert_eq!(tau, once);
    }

    fn cluttered() -> Environment {
        let mut env = Environment::empty(Aabb::new(Vec2::new(-2.0, -2.0), Vec2::new(2.0, 2.0)));
        env.objects.push(Obstacle::circle(Vec2::new(0.0, 0.95), 0.15));
        env.objects.push(Obstacle::Box {
            min: Vec2::new(0.6, 0.3),
            max: Vec2::new(0.8, 0.5),
        });
        env
    }

    fn sweep(len: usize) -> Trajectory {
        let a = [0.2, 0.3, 0.1];
        let b = [1.8, -0.4, 0.6];
        Trajectory::straight(&a, &b, len).unwrap()
    }

    #[test]
    fn guidance_zero_in_free_space() {
        let arm = ArmModel::planar_3link();
        let env = Environment::empty(Aabb::new(Vec2::new(-2.0, -2.0), Vec2::new(2.0, 2.0)));
        let nz = Normalizer::from_arm(&arm);
        let tau = nz.normalize(&Trajectory::straight(&[0.3, 0.0, 0.0], &[0.3, 0.0, 0.0], 16).unwrap());
        let gp = GuidanceParams::default();
        let g = guidance_gradient(&tau, &arm, &env, &gp, &nz);
        // smoothing a constant row sum leaves only rounding residue
        assert!(g.iter().all(|v| v.abs() < 1e-18));
        let (cost, _) = guidance_cost_grad(&tau, &arm, &env, &gp, &nz);
        assert!(cost < 1e-30);
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let arm = ArmModel::planar_3link();
        let env = cluttered();
        let nz = Normalizer::from_arm(&arm);
        let tau = nz.normalize(&sweep(16));
        let gp = GuidanceParams {
            k_smooth: 0.3,
            ..Default::default()
        };
        let (c0, g) = guidance_cost_grad(&tau, &arm, &env, &gp, &nz);
        assert!(c0 > 0.0);
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..tau.as_slice().len() {
            let mut p = tau.clone();
            p.as_mut_slice()[i] += h;
            let mut m = tau.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (guidance_cost_grad(&p, &arm, &env, &gp, &nz).0 - guidance_cost_grad(&m, &arm, &env, &gp, &nz).0)
                / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / scale < 1e-3, "i={i} fd={fd} g={}", g[i]);
            checked += 1;
        }
        assert_eq!(checked, 48);
    }

    #[test]
    fn guidance_is_clamped_and_pins_endpoints() {
        let arm = ArmModel::planar_3link();
        let env = cluttered();
        let nz = Normalizer::from_arm(&arm);
        let tau = nz.normalize(&sweep(16));
        let gp = GuidanceParams {
            k_coll: 50.0,
            g_max: 0.25,
            ..Default::default()
        };
        let g = guidance_gradient(&tau, &arm, &env, &gp, &nz);
        assert!(g.iter().any(|v| v.abs() == 0.25));
        assert!(g.iter().all(|v| v.abs() <= 0.25));
        assert!(g[..3].iter().chain(&g[45..]).all(|v| *v == 0.0));
    }

    struct Fixed {
        len: usize,
        scale: f64,
    }

    impl VelocityModel for Fixed {
        fn horizon(&self) -> usize {
            self.len
        }
        fn dof(&self) -> usize {
            3
        }
        fn predict(&self, x_t: &[f64], time: f64, cond: &Conditioning) -> Vec<f64> {
            x_t.iter()
                .enumerate()
                .map(|(i, x)| self.scale * x * (1.0 - time) + 0.1 * cond.phi.len() as f64 * (i % 3) as f64)
                .collect()
        }
    }

    fn problem() -> PlanningProblem {
        PlanningProblem {
            q_s: crate::Configuration(vec![0.2, 0.3, 0.1]),
            q_g: crate::Configuration(vec![1.8, -0.4, 0.6]),
            env: cluttered(),
        }
    }

    #[test]
    fn sampling_is_deterministic_and_constrained() {
        let arm = ArmModel::planar_3link();
        let nz = Normalizer::from_arm(&arm);
        let sched = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let model = Fixed { len: 16, scale: 0.5 };
        let cfg = SamplerConfig {
            n_infer_steps: 10,
            batch_size: 4,
            ..Default::default()
        };
        let phi = EnvRepresentation::parse("0110").unwrap();
        let pr = problem();
        let gp = GuidanceParams::default();
        let ctx = GuidanceContext {
            params: &gp,
            arm: &arm,
            env: &pr.env,
        };
        let qs = nz.normalize_config(&pr.q_s);
        let qg = nz.normalize_config(&pr.q_g);
        let mut calls = 0;
        let mut obs = |_: usize, _: usize, x: &Trajectory| {
            assert_eq!(x.first(), qs.as_slice());
            assert_eq!(x.last(), qg.as_slice());
            calls += 1;
        };
        let a = sample_batch(&model, &sched, &cfg, &pr, &phi, &nz, Some(ctx), &mut rng(9), &mut obs).unwrap();
        assert_eq!(calls, 40);
        let b = sample_batch(&model, &sched, &cfg, &pr, &phi, &nz, Some(ctx), &mut rng(9), &mut |_, _, _| {}).unwrap();
        assert_eq!(a, b);
        for tau in &a {
            assert_eq!(tau.len(), 16);
            assert_eq!(tau.first(), &pr.q_s[..]);
            assert_eq!(tau.last(), &pr.q_g[..]);
        }
        let distinct: BTreeSet<Vec<u64>> = a
            .iter()
            .map(|t| t.as_slice().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn best_prefers_fewest_colliding_waypoints() {
        let arm = ArmModel::planar_3link();
        let env = cluttered();
        let p = TrajOptParams::default();
        let bad = Trajectory::straight(&[1.3, 0.0, 0.0], &[1.8, 0.0, 0.0], 8).unwrap();
        let good = Trajectory::straight(&[-1.0, 0.0, 0.0], &[-1.5, 0.0, 0.0], 8).unwrap();
        let c = [bad.clone(), good.clone(), bad.clone()];
        assert!(colliding_waypoint_count(&arm, &env, &bad).unwrap() > 0);
        assert_eq!(best_trajectory(&c, &arm, &env, &p).unwrap(), 1);
        let same = [good.clone(), good.clone(), good];
        assert_eq!(best_trajectory(&same, &arm, &env, &p).unwrap(), 0);
        assert!(best_trajectory(&[], &arm, &env, &p).is_err());
    }
}
