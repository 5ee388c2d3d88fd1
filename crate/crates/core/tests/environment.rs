use cbf_compose::environment::{Bounds, Environment, LidarConfig, Shape};
use cbf_compose::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn big() -> Bounds {
    Bounds { min: [-10.0, -10.0], max: [10.0, 10.0] }
}

fn unit_circle_env() -> Environment {
    Environment::new(big(), vec![Shape::Circle { center: [0.0, 0.0], radius: 0.5 }]).unwrap()
}

#[test]
fn circle_distance_examples() {
    let env = unit_circle_env();
    assert!((env.signed_distance([1.0, 0.0]) - 0.5).abs() < 1e-15);
    assert!(env.signed_distance([0.5, 0.0]).abs() < 1e-15);
    assert!(env.signed_distance([0.3, 0.4]).abs() < 1e-15);
    assert!((env.signed_distance([0.0, 0.0]) + 0.5).abs() < 1e-15);
}

#[test]
fn walls_clip_the_distance() {
    let env = Environment::new(Bounds { min: [-2.0, -2.0], max: [2.0, 2.0] }, vec![]).unwrap();
    assert!((env.signed_distance([1.5, 0.0]) - 0.5).abs() < 1e-15);
    assert!(env.signed_distance([2.5, 0.0]) < 0.0);
}

#[test]
fn empty_scan_has_only_boundary_unsafe_points() {
    let env = Environment::new(big(), vec![]).unwrap();
    let cfg = LidarConfig::new(1.0);
    let m = env.lidar_scan(&[0.3, -0.2], &cfg).unwrap();
    assert!(m.unsafe_points.is_empty() && m.occluded_points.is_empty());
    assert_eq!(m.boundary_points.len(), cfg.n_rays);
    for p in &m.boundary_points {
        assert!(((p[0] - 0.3).hypot(p[1] + 0.2) - 1.0).abs() < 1e-12);
    }
    // Every ray contributes samples out to the radius.
    let per_ray = (1.0 / cfg.sample_step + 1e-9).floor() as usize;
    assert_eq!(m.safe_points.len(), 1 + cfg.n_rays * per_ray);
    assert!(m.ranges.iter().all(|&r| r == 1.0));
}

#[test]
fn ray_toward_obstacle_hits_at_expected_range() {
    let env = unit_circle_env();
    let cfg = LidarConfig { radius: 1.1, n_rays: 8, sample_step: 0.01 };
    // Ray 4 of 8 points along -x, straight at the obstacle center.
    let m = env.lidar_scan(&[1.1, 0.0, 0.0], &cfg).unwrap();
    assert!((m.ranges[4] - 0.6).abs() < 1e-12);
    let first_unsafe =
        m.unsafe_points.iter().filter(|p| p[1].abs() < 1e-12 && p[0] < 1.1).map(|p| 1.1 - p[0]).fold(f64::INFINITY, f64::min);
    assert!((first_unsafe - 0.6).abs() < 1e-9);
    // Distance 0.6 from the center is 0.1 from the surface.
    let m = env.lidar_scan(&[0.6, 0.0], &cfg).unwrap();
    assert!((m.ranges[4] - 0.1).abs() < 1e-12);
}

#[test]
fn four_rays_in_a_box() {
    let env = Environment::new(Bounds { min: [-1.0, -2.0], max: [3.0, 1.0] }, vec![]).unwrap();
    let m = env.lidar_scan(&[0.0, 0.0], &LidarConfig { radius: 5.0, n_rays: 4, sample_step: 0.1 }).unwrap();
    let want = [3.0, 1.0, 1.0, 2.0];
    for (r, w) in m.ranges.iter().zip(want) {
        assert!((r - w).abs() < 1e-12, "{:?}", m.ranges);
    }
    let env = Environment::new(big(), vec![Shape::Rect { min: [0.5, -1.0], max: [1.0, 1.0] }]).unwrap();
    let m = env.lidar_scan(&[0.0, 0.0], &LidarConfig { radius: 2.0, n_rays: 4, sample_step: 0.1 }).unwrap();
    assert!((m.ranges[0] - 0.5).abs() < 1e-12);
    assert_eq!(&m.ranges[1..], &[2.0, 2.0, 2.0]);
}

#[test]
fn scan_from_obstacle_is_rejected() {
    let env = unit_circle_env();
    assert!(matches!(env.lidar_scan(&[0.1, 0.0], &LidarConfig::new(1.0)), Err(Error::ScanFromUnsafeState { .. })));
}

#[test]
fn trajectory_safety_examples() {
    let empty = Environment::new(big(), vec![]).unwrap();
    assert_eq!(empty.is_trajectory_safe(&vec![vec![0.0, 0.0]; 5]), (true, None));
    let env = unit_circle_env();
    let states: Vec<Vec<f64>> = (0..21).map(|i| vec![-1.0 + 0.1 * i as f64, 0.0]).collect();
    // -1.0 + 0.1 * 5 = -0.5 lies on the surface, which already counts as a collision.
    assert_eq!(env.is_trajectory_safe(&states), (false, Some(5)));
}

#[test]
fn invalid_shapes_are_rejected() {
    assert!(Environment::new(big(), vec![Shape::Circle { center: [0.0, 0.0], radius: 0.0 }]).is_err());
    assert!(Environment::new(big(), vec![Shape::Rect { min: [0.0, 0.0], max: [0.0, 1.0] }]).is_err());
    assert!(Environment::new(Bounds { min: [0.0, 0.0], max: [0.0, 1.0] }, vec![]).is_err());
}

fn random_env(rng: &mut ChaCha8Rng) -> Environment {
    let mut obs = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        if rng.gen_bool(0.5) {
            obs.push(Shape::Circle { center: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)], radius: rng.gen_range(0.1..0.5) });
        } else {
            let lo = [rng.gen_range(-1.5..1.0), rng.gen_range(-1.5..1.0)];
            obs.push(Shape::Rect { min: lo, max: [lo[0] + rng.gen_range(0.1..0.5), lo[1] + rng.gen_range(0.1..0.5)] });
        }
    }
    Environment::new(Bounds { min: [-2.0, -2.0], max: [2.0, 2.0] }, obs).unwrap()
}

#[test]
fn measurement_invariants_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut scans = 0;
    while scans < 10_000 {
        let env = random_env(&mut rng);
        let q = [rng.gen_range(-1.9..1.9), rng.gen_range(-1.9..1.9)];
        if env.signed_distance(q) <= 0.0 {
            continue;
        }
        let cfg = LidarConfig { radius: rng.gen_range(0.3..1.2), n_rays: 24, sample_step: 0.1 };
        let m = env.lidar_scan(&q, &cfg).unwrap();
        for p in m.safe_points.iter().chain(&m.unsafe_points) {
            assert!((p[0] - q[0]).hypot(p[1] - q[1]) <= cfg.radius + 1e-12);
        }
        assert!(m.safe_points.iter().all(|&p| env.signed_distance(p) > 0.0));
        assert!(m.unsafe_points.iter().all(|&p| env.signed_distance(p) <= 1e-9));
        scans += 1;
    }
}

#[test]
fn scans_are_deterministic() {
    let env = unit_circle_env();
    let cfg = LidarConfig::new(1.1);
    let a = env.lidar_scan(&[-0.9, 0.2, 1.0], &cfg).unwrap();
    let b = env.lidar_scan(&[-0.9, 0.2, 1.0], &cfg).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(a.hash_hex(), b.hash_hex());
}

proptest! {
    #[test]
    fn distance_is_one_lipschitz(
        seed in 0u64..1000,
        a in prop::array::uniform2(-3.0f64..3.0),
        b in prop::array::uniform2(-3.0f64..3.0),
    ) {
        let env = random_env(&mut ChaCha8Rng::seed_from_u64(seed));
        let lhs = (env.signed_distance(a) - env.signed_distance(b)).abs();
        prop_assert!(lhs <= (a[0] - b[0]).hypot(a[1] - b[1]) + 1e-12);
    }
}
