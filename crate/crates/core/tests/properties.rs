use kcplan_core::dataset::{generate_environment, LevelSpec, Normalizer};
use kcplan_core::denoiser::{patchify, unpatchify};
use kcplan_core::diffusion::{apply_endpoint_constraint, make_schedule, q_sample, v_target, x0_from_v, eps_from_v, ScheduleKind};
use kcplan_core::keyconfig::EnvRepresentation;
use kcplan_core::metrics::evaluate_trajectory;
use kcplan_core::seed::rng_for;
use kcplan_core::trajopt::{cost_and_full_gradient, costs, straight_line_seeds, TrajOptParams};
use kcplan_core::{ArmModel, Trajectory};
use proptest::prelude::*;

fn traj(dim: usize, len: usize) -> impl Strategy<Value = Trajectory> {
    prop::collection::vec(-3.0f64..3.0, dim * len).prop_map(move |v| Trajectory::from_flat(dim, v).unwrap())
}

proptest! {
    #[test]
    fn patchify_round_trip(p in 1usize..5, tokens in 1usize..6, dof in 1usize..4, seed in any::<u64>()) {
        let len = p * tokens;
        let x: Vec<f64> = (0..len * dof).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
        let t = patchify(&x, dof, p).unwrap();
        prop_assert_eq!(t.len(), tokens);
        let back = unpatchify(&t);
        prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn normalizer_round_trip(tau in traj(3, 6)) {
        let n = Normalizer::from_arm(&ArmModel::planar_3link());
        let back = n.denormalize(&n.normalize(&tau));
        for (a, b) in back.as_slice().iter().zip(tau.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()) * 4.0);
        }
    }

    #[test]
    fn v_algebra_round_trip(
        x0 in prop::collection::vec(-1.0f64..1.0, 12),
        eps in prop::collection::vec(-3.0f64..3.0, 12),
        t in 1usize..=256,
    ) {
        let sched = make_schedule(ScheduleKind::Cosine, 256).unwrap();
        let xt = q_sample(&x0, &eps, t, &sched);
        let v = v_target(&x0, &eps, t, &sched);
        for (a, b) in x0_from_v(&xt, &v, t, &sched).iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in eps_from_v(&xt, &v, t, &sched).iter().zip(&eps) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoint_constraint_pins_exactly(mut tau in traj(3, 7), a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 3)) {
        let inner: Vec<f64> = tau.as_slice()[3..18].to_vec();
        apply_endpoint_constraint(&mut tau, &a, &b);
        prop_assert_eq!(tau.first(), &a[..]);
        prop_assert_eq!(tau.last(), &b[..]);
        prop_assert_eq!(&tau.as_slice()[3..18], &inner[..]);
    }

    #[test]
    fn phi_text_round_trip(bits in prop::collection::vec(any::<bool>(), 0..100)) {
        let phi = EnvRepresentation { bits };
        let s = phi.to_string();
        prop_assert_eq!(EnvRepresentation::parse(&s).unwrap(), phi);
    }

    #[test]
    fn success_implies_clean_metrics(seed in 0u64..200) {
        let arm = ArmModel::planar_3link();
        let mut rng = rng_for(seed, 1, 0);
        let env = generate_environment(&LevelSpec::for_level(3).unwrap(), &mut rng);
        let tau = straight_line_seeds(&[0.3, 0.2, -0.4], &[-1.2, 0.9, 0.6], 16, 2, 0.5, &mut rng).unwrap().pop().unwrap();
        let m = evaluate_trajectory(&arm, &env, &tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.collision_rate));
        prop_assert!(m.penetration_depth >= 0.0);
        if m.success {
            prop_assert_eq!(m.collision_rate, 0.0);
            prop_assert_eq!(m.penetration_depth, 0.0);
        } else {
            prop_assert!(m.collision_rate > 0.0);
        }
    }
}

/// Largest component error of central differences, relative to the largest
/// gradient component.
fn fd_relative_error(arm: &ArmModel, env: &kcplan_core::Environment, tau: &Trajectory, p: &TrajOptParams) -> f64 {
    let (_, g) = cost_and_full_gradient(arm, env, tau, p);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..g.len() {
        let mut a = tau.clone();
        let mut b = tau.clone();
        a.as_mut_slice()[i] += h;
        b.as_mut_slice()[i] -= h;
        let fd = (costs(arm, env, &a, p).total - costs(arm, env, &b, p).total) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs());
    }
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    worst / scale
}

#[test]
fn trajopt_gradient_matches_finite_differences() {
    let arm = ArmModel::planar_3link();
    let p = TrajOptParams::default();
    let mut colliding = 0;
    for k in 0..20u64 {
        let mut rng = rng_for(77, 1, k);
        let env = generate_environment(&LevelSpec::for_level(4).unwrap(), &mut rng);
        let tau = straight_line_seeds(&[-0.4, 0.5, 0.3], &[0.6, -0.5, -0.2], 24, 2, 0.6, &mut rng)
            .unwrap()
            .pop()
            .unwrap();
        if costs(&arm, &env, &tau, &p).collision > 0.0 {
            colliding += 1;
        }
        let e = fd_relative_error(&arm, &env, &tau, &p);
        assert!(e < 1e-4, "trajectory {k}: relative error {e:e}");
    }
    assert!(colliding >= 10, "only {colliding} of 20 trajectories touch obstacles");
}
