//! Procedural shelf environments, planning problems, ground-truth
//! trajectories and joint-space normalization.
//!
//! The workspace is a planar analog of a three-tier shelf: four horizontal
//! boards and a back panel in front of the arm form three slots, and each
//! difficulty level scatters a different number of random objects per slot.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::keyconfig::EnvRepresentation;
use crate::math::dist;
use crate::planners::{birrt_plan, resample_to_horizon, shortcut, RrtParams};
use crate::trajopt::{optimize, TrajOptParams};
use crate::world::{
    in_collision, swept_clearance, Aabb, ArmModel, Configuration, Environment, Obstacle,
    Trajectory, Vec2,
};
use crate::{Error, Result};

/// Default trajectory horizon.
pub const HORIZON: usize = 48;

/// Sweep density used when validating trajectories.
pub const EVAL_N_SUB: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningProblem {
    pub q_s: Configuration,
    pub q_g: Configuration,
    pub env: Environment,
}

impl PlanningProblem {
    pub fn validate(&self, arm: &ArmModel) -> Result<()> {
        if in_collision(arm, &self.env, &self.q_s)? || in_collision(arm, &self.env, &self.q_g)? {
            return Err(Error::InvalidEndpoints);
        }
        Ok(())
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub q_s: Configuration,
    pub q_g: Configuration,
    pub tau: Trajectory,
    pub env: Environment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<EnvRepresentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
}

impl DatasetRecord {
    pub fn problem(&self) -> PlanningProblem {
        PlanningProblem {
            q_s: self.q_s.clone(),
            q_g: self.q_g.clone(),
            env: self.env.clone(),
        }
    }

    /// Endpoints match, horizon is `horizon`, and every segment is free at
    /// `n_sub` sweep samples.
    pub fn validate(&self, arm: &ArmModel, horizon: usize, n_sub: usize) -> Result<()> {
        if self.tau.len() != horizon {
            return Err(Error::invalid("record", "wrong horizon"));
        }
        if self.tau.first() != &self.q_s[..] || self.tau.last() != &self.q_g[..] {
            return Err(Error::invalid("record", "trajectory endpoints differ from problem"));
        }
        if !trajectory_free(arm, &self.env, &self.tau, n_sub)? {
            return Err(Error::invalid("record", "trajectory collides"));
        }
        Ok(())
    }
}

/// Every segment's swept clearance is non-negative.
pub fn trajectory_free(arm: &ArmModel, env: &Environment, tau: &Trajectory, n_sub: usize) -> Result<bool> {
    for t in 0..tau.len() - 1 {
        if swept_clearance(arm, env, tau.row(t), tau.row(t + 1), n_sub)? < 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Fixed shelf geometry shared by every environment of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShelfLayout {
    pub bounds: Aabb,
    /// Left and right x extent of the boards.
    pub x_range: (f64, f64),
    /// Board center heights, bottom to top.
    pub board_y: Vec<f64>,
    pub board_thickness: f64,
    pub back_thickness: f64,
}

impl Default for ShelfLayout {
    fn default() -> Self {
        ShelfLayout {
            bounds: Aabb::new(Vec2::new(-1.5, -1.5), Vec2::new(1.5, 1.5)),
            x_range: (0.55, 1.25),
            board_y: alloc::vec![-0.66, -0.22, 0.22, 0.66],
            board_thickness: 0.04,
            back_thickness: 0.04,
        }
    }
}

impl ShelfLayout {
    pub fn fixtures(&self) -> Vec<Obstacle> {
        let (x0, x1) = self.x_range;
        let h = self.board_thickness * 0.5;
        let mut out: Vec<Obstacle> = self
            .board_y
            .iter()
            .map(|y| Obstacle::aabb(Vec2::new(x0, y - h), Vec2::new(x1, y + h)))
            .collect();
        if let (Some(lo), Some(hi)) = (self.board_y.first(), self.board_y.last()) {
            out.push(Obstacle::aabb(
                Vec2::new(x1, lo - h),
                Vec2::new(x1 + self.back_thickness, hi + h),
            ));
        }
        out
    }

    /// Free interior of each slot between consecutive boards.
    pub fn slots(&self) -> Vec<Aabb> {
        let h = self.board_thickness * 0.5;
        self.board_y
            .windows(2)
            .map(|w| {
                Aabb::new(
                    Vec2::new(self.x_range.0, w[0] + h),
                    Vec2::new(self.x_range.1, w[1] - h),
                )
            })
            .collect()
    }
}

/// Object placement rules for one difficulty level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: u8,
    /// Inclusive range of objects placed in every slot.
    pub objects_per_region: (usize, usize),
    /// Circle radius or box half-extent range, meters.
    pub size_range: (f64, f64),
    pub layout: ShelfLayout,
}

impl LevelSpec {
    /// Level 1: empty shelf; 2: one object per slot; 3: two; 4: three or four.
    pub fn for_level(level: u8) -> Result<Self> {
        let objects_per_region = match level {
            1 => (0, 0),
            2 => (1, 1),
            3 => (2, 2),
            4 => (3, 4),
            _ => return Err(Error::invalid("level", "must be 1..=4")),
        };
        Ok(LevelSpec {
            level,
            objects_per_region,
            size_range: (0.04, 0.08),
            layout: ShelfLayout::default(),
        })
    }
}

/// Draws an environment: the shelf fixtures plus random circles and boxes
/// placed uniformly inside each slot.
pub fn generate_environment<R: Rng + ?Sized>(spec: &LevelSpec, rng: &mut R) -> Environment {
    let mut objects = Vec::new();
    let (lo, hi) = spec.objects_per_region;
    for slot in spec.layout.slots() {
        let n = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        for _ in 0..n {
            let size = if spec.size_range.1 > spec.size_range.0 {
                rng.random_range(spec.size_range.0..spec.size_range.1)
            } else {
                spec.size_range.0
            };
            let cx = rng.random_range(slot.min.x + size..slot.max.x - size);
            let cy = rng.random_range(slot.min.y + size..slot.max.y - size);
            let c = Vec2::new(cx, cy);
            if rng.random::<bool>() {
                objects.push(Obstacle::circle(c, size));
            } else {
                // aspect ratio between 1:2 and 2:1, longest half-extent = size
                let other = size * rng.random_range(0.5..1.0);
                let half = if rng.random::<bool>() {
                    Vec2::new(size, other)
                } else {
                    Vec2::new(other, size)
                };
                objects.push(Obstacle::aabb(c - half, c + half));
            }
        }
    }
    Environment {
        fixtures: spec.layout.fixtures(),
        objects,
        bounds: spec.layout.bounds,
    }
}

fn random_config<R: Rng + ?Sized>(arm: &ArmModel, rng: &mut R) -> Configuration {
    Configuration(
        arm.joint_limits
            .iter()
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect(),
    )
}

/// Uniform collision-free endpoints at least `min_separation` apart.
pub fn sample_problem<R: Rng + ?Sized>(
    env: &Environment,
    arm: &ArmModel,
    min_separation: f64,
    rng: &mut R,
    max_tries: usize,
) -> Result<PlanningProblem> {
    sample_problem_in(env, arm, &[], min_separation, rng, max_tries)
}

/// Like [`sample_problem`], but when `regions` is non-empty both tips must
/// lie inside one of them, in different regions from each other.
pub fn sample_problem_in<R: Rng + ?Sized>(
    env: &Environment,
    arm: &ArmModel,
    regions: &[Aabb],
    min_separation: f64,
    rng: &mut R,
    max_tries: usize,
) -> Result<PlanningProblem> {
    let region_of = |q: &[f64]| -> Option<usize> {
        let tip = crate::world::tip_position(arm, q).ok()?;
        regions.iter().position(|r| r.contains(tip))
    };
    let draw_free = |rng: &mut R, avoid: Option<usize>| -> Option<(Configuration, Option<usize>)> {
        let q = random_config(arm, rng);
        let reg = if regions.is_empty() {
            None
        } else {
            match region_of(&q) {
                Some(r) if Some(r) != avoid => Some(r),
                _ => return None,
            }
        };
        if in_collision(arm, env, &q).ok()? {
            return None;
        }
        Some((q, reg))
    };
    let mut tries = 0;
    while tries < max_tries {
        tries += 1;
        let Some((q_s, reg)) = draw_free(rng, None) else {
            continue;
        };
        while tries < max_tries {
            tries += 1;
            let Some((q_g, _)) = draw_free(rng, reg) else {
                continue;
            };
            if dist(&q_s, &q_g) >= min_separation {
                return Ok(PlanningProblem {
                    q_s,
                    q_g,
                    env: env.clone(),
                });
            }
        }
    }
    Err(Error::PlanningFailed("no valid problem within max_tries"))
}

/// Settings for ground-truth generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthConfig {
    pub rrt: RrtParams,
    pub shortcut_iterations: usize,
    pub trajopt: TrajOptParams,
    pub horizon: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            rrt: RrtParams::default(),
            shortcut_iterations: 200,
            trajopt: TrajOptParams::default(),
            horizon: HORIZON,
        }
    }
}

/// Bi-RRT → shortcut → resample → optimize. Fails when planning fails or
/// the optimized trajectory still collides.
pub fn generate_record<R: Rng + ?Sized>(
    problem: &PlanningProblem,
    arm: &ArmModel,
    cfg: &GroundTruthConfig,
    rng: &mut R,
) -> Result<DatasetRecord> {
    let path = birrt_plan(problem, arm, &cfg.rrt, rng)?;
    let path = shortcut(
        &path,
        arm,
        &problem.env,
        cfg.shortcut_iterations,
        cfg.rrt.check_resolution,
        rng,
    );
    let seed = resample_to_horizon(&path, cfg.horizon)?;
    let (tau, _) = optimize(&seed, arm, &problem.env, &cfg.trajopt);
    let record = DatasetRecord {
        q_s: problem.q_s.clone(),
        q_g: problem.q_g.clone(),
        tau,
        env: problem.env.clone(),
        phi: None,
        level: None,
    };
    record
        .validate(arm, cfg.horizon, EVAL_N_SUB)
        .map_err(|_| Error::PlanningFailed("ground truth collides after optimization"))?;
    Ok(record)
}

/// Per-joint affine map of the joint limits onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

impl Normalizer {
    pub fn from_arm(arm: &ArmModel) -> Self {
        Normalizer {
            center: arm.joint_limits.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
            half_range: arm.joint_limits.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn normalize_config(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.center.iter().zip(&self.half_range))
            .map(|(x, (c, h))| (x - c) / h)
            .collect()
    }

    pub fn denormalize_config(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.center.iter().zip(&self.half_range))
            .map(|(x, (c, h))| c + x * h)
            .collect()
    }

    pub fn normalize(&self, tau: &Trajectory) -> Trajectory {
        self.map(tau, |x, c, h| (x - c) / h)
    }

    pub fn denormalize(&self, tau: &Trajectory) -> Trajectory {
        self.map(tau, |x, c, h| c + x * h)
    }

    fn map(&self, tau: &Trajectory, f: impl Fn(f64, f64, f64) -> f64) -> Trajectory {
        let d = self.dim();
        let data = tau
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, self.center[i % d], self.half_range[i % d]))
            .collect();
        Trajectory::from_flat(d, data).expect("same shape as input")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Rng as ChaRng;
    use rand::SeedableRng;

    #[test]
    fn level_one_has_no_objects_and_level_four_has_three_or_four_per_slot() {
        let mut rng = ChaRng::seed_from_u64(5);
        let e = generate_environment(&LevelSpec::for_level(1).unwrap(), &mut rng);
        assert!(e.objects.is_empty());
        assert_eq!(e.fixtures, ShelfLayout::default().fixtures());
        let spec = LevelSpec::for_level(4).unwrap();
        for _ in 0..50 {
            let e = generate_environment(&spec, &mut rng);
            for slot in spec.layout.slots() {
                let n = e
                    .objects
                    .iter()
                    .filter(|o| slot.contains(o.bounds().center()))
                    .count();
                assert!((3..=4).contains(&n));
            }
        }
        assert!(LevelSpec::for_level(5).is_err());
    }

    #[test]
    fn empty_env_problem_is_quick_and_full_env_fails() {
        let arm = ArmModel::planar_3link();
        let mut rng = ChaRng::seed_from_u64(1);
        let env = Environment::empty(ShelfLayout::default().bounds);
        let p = sample_problem(&env, &arm, 0.5, &mut rng, 100).unwrap();
        assert!(dist(&p.q_s, &p.q_g) >= 0.5);
        let mut full = env.clone();
        full.objects.push(Obstacle::circle(Vec2::ZERO, 1.4));
        assert!(sample_problem(&full, &arm, 0.5, &mut rng, 200).is_err());
    }

    #[test]
    fn normalizer_round_trip_and_limits() {
        let arm = ArmModel::planar_3link();
        let n = Normalizer::from_arm(&arm);
        let lo: Vec<f64> = arm.joint_limits.iter().map(|l| l.0).collect();
        let hi: Vec<f64> = arm.joint_limits.iter().map(|l| l.1).collect();
        assert!(n.normalize_config(&lo).iter().all(|v| *v == -1.0));
        assert!(n.normalize_config(&hi).iter().all(|v| *v == 1.0));
        let tau = Trajectory::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.1, -0.4]]).unwrap();
        let back = n.denormalize(&n.normalize(&tau));
        for (a, b) in back.as_slice().iter().zip(tau.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
