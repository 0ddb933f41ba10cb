//! Trajectory quality metrics used by the benchmark.

use serde::{Deserialize, Serialize};

use crate::dataset::EVAL_N_SUB;
use crate::world::{signed_clearance, swept_clearance, ArmModel, Environment, Trajectory};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// No segment collides.
    pub success: bool,
    /// Colliding segments over `T − 1`.
    pub collision_rate: f64,
    /// Largest penetration over all sweep samples, meters (0 when clear).
    pub penetration_depth: f64,
}

/// Segment-level metrics at the evaluation sweep density.
pub fn evaluate_trajectory(arm: &ArmModel, env: &Environment, tau: &Trajectory) -> Result<TrajectoryMetrics> {
    evaluate_trajectory_with(arm, env, tau, EVAL_N_SUB)
}

pub fn evaluate_trajectory_with(
    arm: &ArmModel,
    env: &Environment,
    tau: &Trajectory,
    n_sub: usize,
) -> Result<TrajectoryMetrics> {
    let segments = tau.len() - 1;
    let mut colliding = 0usize;
    let mut worst = f64::INFINITY;
    for t in 0..segments {
        let c = swept_clearance(arm, env, tau.row(t), tau.row(t + 1), n_sub)?;
        if c < 0.0 {
            colliding += 1;
        }
        worst = worst.min(c);
    }
    Ok(TrajectoryMetrics {
        success: colliding == 0,
        collision_rate: colliding as f64 / segments as f64,
        penetration_depth: if worst < 0.0 { -worst } else { 0.0 },
    })
}

/// Number of waypoints whose pose is in collision.
pub fn colliding_waypoints(arm: &ArmModel, env: &Environment, tau: &Trajectory) -> Result<usize> {
    let mut n = 0;
    for q in tau.rows() {
        if signed_clearance(arm, env, q)? < 0.0 {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Aabb, Obstacle, Vec2};
    use alloc::vec::Vec;

    fn env(objs: Vec<Obstacle>) -> Environment {
        Environment {
            fixtures: Vec::new(),
            objects: objs,
            bounds: Aabb::new(Vec2::new(-2.0, -2.0), Vec2::new(2.0, 2.0)),
        }
    }

    #[test]
    fn clear_trajectory() {
        let arm = ArmModel::planar_3link();
        let tau = Trajectory::straight(&[0.0, 0.3, 0.3], &[1.0, 0.3, 0.3], 10).unwrap();
        let m = evaluate_trajectory(&arm, &env(Vec::new()), &tau).unwrap();
        assert_eq!(
            m,
            TrajectoryMetrics {
                success: true,
                collision_rate: 0.0,
                penetration_depth: 0.0
            }
        );
    }

    #[test]
    fn static_penetration_depth() {
        // Straight arm tip at 1.2; circle center 0.17 beyond it: sd = 0.17 - 0.2 - 0.04.
        let arm = ArmModel::planar_3link();
        let e = env(alloc::vec![Obstacle::circle(Vec2::new(1.2 + 0.2 + 0.04 - 0.07, 0.0), 0.2)]);
        let tau = Trajectory::straight(&[0.0; 3], &[0.0; 3], 4).unwrap();
        let m = evaluate_trajectory(&arm, &e, &tau).unwrap();
        assert!(!m.success);
        assert_eq!(m.collision_rate, 1.0);
        assert!((m.penetration_depth - 0.07).abs() < 1e-12);
    }
}
