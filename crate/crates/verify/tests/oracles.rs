use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varscale_core::config::{Method, TrainConfig};
use varscale_core::episodic::{make_domain, DomainConfig, SyntheticDomain};
use varscale_core::metric::{dimensional_distance, DistanceKind};
use varscale_core::optim::{OptimizerKind, OptimizerState};
use varscale_core::variational::{kl_term_scalar, GaussianPrior, SigmaMode};
use varscale_verify::adam::ReferenceAdam;
use varscale_verify::baseline::{degenerate_svs, joint_training_baseline, svs_trajectory, trajectory_gap};
use varscale_verify::geometry::{geometry_oracle, EXAMPLE_CENTERS, EXAMPLE_QUERY};
use varscale_verify::kl::mc_kl;

fn domain() -> SyntheticDomain {
    make_domain(&DomainConfig::default(), 4).unwrap()
}

fn svs_config(distance: DistanceKind) -> TrainConfig {
    let mut c = TrainConfig::for_method(Method::Svs);
    c.distance = distance;
    c.seed = 12;
    c.scaling.mu_init = 3.0;
    degenerate_svs(&c.resolve().unwrap())
}

#[test]
fn zero_steps_start_from_the_same_state() {
    let d = domain();
    let c = svs_config(DistanceKind::Euclidean);
    let a = joint_training_baseline(&c, &d, 0).unwrap();
    let b = svs_trajectory(&c, &d, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn degenerate_variational_training_is_joint_training() {
    let d = domain();
    for distance in [DistanceKind::Euclidean, DistanceKind::Cosine] {
        let c = svs_config(distance);
        let a = joint_training_baseline(&c, &d, 100).unwrap();
        let b = svs_trajectory(&c, &d, 100).unwrap();
        let gap = trajectory_gap(&a, &b);
        assert!(gap <= 1e-10, "{distance:?}: gap {gap:e}");
        // the scaling really moved, so the comparison covers its update
        assert!((a[100].alpha - a[0].alpha).abs() > 1e-3);
    }
}

#[test]
fn random_sigma_breaks_the_equivalence() {
    let d = domain();
    let c = svs_config(DistanceKind::Euclidean);
    let mut noisy = c.clone();
    noisy.scaling.sigma_init = 0.5;
    let a = joint_training_baseline(&c, &d, 100).unwrap();
    let b = svs_trajectory(&noisy, &d, 100).unwrap();
    assert!(trajectory_gap(&a, &b) > 1e-4);
}

#[test]
fn baseline_rejects_other_methods() {
    let c = TrainConfig::for_method(Method::Pn);
    assert!(joint_training_baseline(&c, &domain(), 1).is_err());
}

#[test]
fn learned_sigma_config_is_not_degenerate() {
    let mut c = TrainConfig::for_method(Method::Svs);
    c.scaling.sigma_mode = SigmaMode::Learned;
    let d = degenerate_svs(&c);
    assert_eq!(d.scaling.sigma_mode, SigmaMode::Fixed);
    assert_eq!(d.scaling.sigma_init, 0.0);
}

#[test]
fn engine_adam_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 20;
    let (lr, b1, b2, eps, wd) = (1e-2, 0.9, 0.999, 1e-8, 1e-3);
    let mut engine = OptimizerState::new(
        OptimizerKind::Adam {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        },
        n,
    );
    let mut reference = ReferenceAdam::new(n, lr, b1, b2, eps, wd);
    let start: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (mut p, mut q) = (start.clone(), start);
    // gradient of a non-convex test function, evaluated at each iterate
    let grad = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v.sin() + 0.3 * v).collect() };
    for _ in 0..100 {
        let (gp, gq) = (grad(&p), grad(&q));
        engine.step(&mut p, &gp, lr).unwrap();
        reference.step(&mut q, &gq);
    }
    let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-10, "{gap:e}");
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut pairs = vec![(100.0, 0.2, 1.0, 1.0)];
    for _ in 0..5 {
        pairs.push((
            rng.random_range(-3.0..3.0),
            rng.random_range(0.1..2.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(0.3..3.0),
        ));
    }
    for (mu, sigma, mu0, sigma0) in pairs {
        let closed = kl_term_scalar(mu, sigma, &GaussianPrior { mu0, sigma0 }) - 0.5;
        let mc = mc_kl(mu, sigma, mu0, sigma0, 200_000, &mut rng).unwrap();
        assert!(mc.covers(closed, 3.0), "({mu},{sigma}) vs ({mu0},{sigma0}): {closed} vs {mc:?}");
    }
}

#[test]
fn geometry_oracle_agrees_with_dimensional_distance() {
    for scales in [[1.0, 1.0], [1.5, 0.5], [0.3, 2.0], [4.0, 4.0]] {
        let weights = [scales[0] * scales[0], scales[1] * scales[1]];
        let d: Vec<f64> = EXAMPLE_CENTERS
            .iter()
            .map(|c| dimensional_distance(&EXAMPLE_QUERY, c, &weights).unwrap())
            .collect();
        let engine = if d[0] < d[1] { 0 } else { 1 };
        assert_eq!(engine, geometry_oracle(EXAMPLE_QUERY, &EXAMPLE_CENTERS, scales), "{scales:?}");
    }
}
