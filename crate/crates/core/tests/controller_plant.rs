use hilo_core::controller::{rad, ReferencePath};
use hilo_core::plant::known_optimum_params;
use hilo_core::protocol::{constant_stiffness_costs, SessionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn nearest_point_agrees_with_dense_sampling() {
    let path = ReferencePath::default_gait();
    let pts = path.points();
    const SUB: usize = 64;
    let mut dense = Vec::with_capacity(pts.len() * SUB);
    for i in 0..pts.len() {
        let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
        for s in 0..SUB {
            let t = s as f64 / SUB as f64;
            dense.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    // finest spacing bounds how far the sampled minimum can overshoot
    let max_step = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            ((b[0] - a[0]).hypot(b[1] - a[1])) / SUB as f64
        })
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let q = [rng.random_range(rad(-40.0)..rad(130.0)), rng.random_range(rad(-10.0)..rad(130.0))];
        let proj = path.nearest(q);
        let sampled = dense.iter().map(|p| (q[0] - p[0]).hypot(q[1] - p[1])).fold(f64::INFINITY, f64::min);
        assert!(proj.distance <= sampled + 1e-12, "{q:?}: {} > {sampled}", proj.distance);
        assert!(proj.distance >= sampled - max_step, "{q:?}: {} << {sampled}", proj.distance);
        let d = (q[0] - proj.point[0]).hypot(q[1] - proj.point[1]);
        assert!((d - proj.distance).abs() < 1e-12);
        assert!((0.0..1.0).contains(&proj.param));
    }
}

#[test]
fn known_optimum_landscape_has_its_minimum_at_the_target() {
    // Lattice argmin of the mean cost over seeds 0..20 is (130, 280); the
    // neighbours sit 1e-4..6e-4 above it, the corners far above.
    let config = SessionConfig {
        plant: known_optimum_params([130.0, 280.0]),
        ..SessionConfig::default()
    };
    let path = config.reference_path().unwrap();
    let seeds: Vec<u64> = (0..20).collect();
    let mean = |k: [f64; 2]| {
        let c = constant_stiffness_costs(&config, &path, k, &seeds);
        c.iter().sum::<f64>() / c.len() as f64
    };
    let centre = mean([130.0, 280.0]);
    assert!((centre - 0.1755379835380).abs() < 1e-9, "{centre}");
    for dh in [-10.0, 0.0, 10.0] {
        for dk in [-10.0, 0.0, 10.0] {
            if dh != 0.0 || dk != 0.0 {
                assert!(mean([130.0 + dh, 280.0 + dk]) > centre);
            }
        }
    }
    assert!(mean([0.0, 0.0]) > centre + 0.5);
    assert!(mean([400.0, 400.0]) > centre + 0.02);
    assert!(mean([200.0, 200.0]) > centre + 0.005);
}
