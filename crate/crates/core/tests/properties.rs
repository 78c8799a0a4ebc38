use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use proptest::prelude::*;

use evsphere::eval::{associate, mean_ape, mean_rpe, RotationTrajectory};
use evsphere::frontend::{
    compensate_frame, format_event, parse_event_stream, segment_events, Event, EventSphericalFrame, FrameConfig, Polarity,
};
use evsphere::geometry::{exp_map, hat, log_map, CameraModel, Distortion, Rotation, SphericalPoint, StampedRotation, Vec2, Vec3};
use evsphere::icp::{align_frame, jacobian, residual, IcpConfig, LineCorrespondence};
use evsphere::map::{MapConfig, SphericalMap, VoxelKey};
use evsphere::panorama::{cylinder_to_pixel, render_panorama, sphere_to_cylinder, PanoramaSpec};
use evsphere::sim::{EventSimulator, MotionProfile, Scene, SimConfig, SphereCap};

fn vec3(scale: f64) -> impl Strategy<Value = Vec3> {
    (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = SphericalPoint> {
    vec3(1.0)
        .prop_filter("away from zero", |v| v.norm() > 1e-3)
        .prop_map(|v| SphericalPoint::from_vector(&v).unwrap())
}

/// Rotation vector with angle in `[lo, hi)`.
fn axis_angle(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    (unit(), lo..hi).prop_map(|(axis, angle)| axis.vector() * angle)
}

fn rotation() -> impl Strategy<Value = Rotation> {
    axis_angle(0.0, PI - 1e-3).prop_map(|v| Rotation::exp(&v))
}

fn camera() -> CameraModel {
    CameraModel::new(199.5, 200.5, 119.7, 89.6, Distortion { k1: -0.03, k2: 0.004, p1: 2e-4, p2: -1e-4, k3: 0.0 }, 240, 180)
        .unwrap()
}

fn rotation_is_valid(r: &Rotation) -> bool {
    let m = r.matrix();
    (m.transpose() * m - nalgebra::Matrix3::identity()).amax() < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
}

// Geometry

proptest! {
    #[test]
    fn exp_log_roundtrip(v in axis_angle(1e-6, PI - 1e-3)) {
        let back = log_map(exp_map(&v).matrix()).unwrap();
        prop_assert!((back - v).norm() < 1e-9);
    }

    #[test]
    fn products_stay_rotations(a in axis_angle(0.0, PI), b in axis_angle(0.0, PI)) {
        prop_assert!(rotation_is_valid(&(exp_map(&a) * exp_map(&b))));
    }

    #[test]
    fn rotation_preserves_norm(r in rotation(), p in vec3(10.0)) {
        prop_assert!(((&r * &p).norm() - p.norm()).abs() < 1e-12 * p.norm().max(1.0));
    }

    #[test]
    fn hat_conjugation(r in rotation(), v in vec3(10.0)) {
        let lhs = hat(&(&r * &v));
        let rhs = r.matrix() * hat(&v) * r.matrix().transpose();
        prop_assert!((lhs - rhs).amax() < 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn pixels_lift_to_unit_forward_directions(u in -20.0..260.0f64, v in -20.0..200.0f64) {
        let p = camera().pixel_to_sphere(&Vec2::new(u, v)).unwrap();
        prop_assert!((p.vector().norm() - 1.0).abs() < 1e-12);
        prop_assert!(p.vector().z > 0.0);
    }
}

// Event front end

fn event_times() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u64..50_000_000, 1..400).prop_map(|mut ns| {
        ns.sort_unstable();
        ns.into_iter().map(|n| format!("{}.{:09}", n / 1_000_000_000, n % 1_000_000_000).parse().unwrap()).collect()
    })
}

fn events_at(times: &[f64], seed: u64) -> Vec<Event> {
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed;
            let polarity = if h & 1 == 0 { Polarity::Positive } else { Polarity::Negative };
            Event::new(t, (h >> 8) as u16 % 240, (h >> 24) as u16 % 180, polarity)
        })
        .collect()
}

proptest! {
    #[test]
    fn compensation_keeps_first_event_and_unit_norm(times in event_times(), seed in any::<u64>(), omega in vec3(10.0)) {
        let events = events_at(&times, seed);
        let cam = camera();
        let frame = compensate_frame(&events, &omega, &cam).unwrap();
        let raw = cam.pixel_to_sphere(&Vec2::new(events[0].u as f64, events[0].v as f64)).unwrap();
        prop_assert_eq!(frame.points[0], raw);
        prop_assert_eq!(frame.t0, events[0].t);
        for p in &frame.points {
            prop_assert!((p.vector().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_respect_cardinality(times in event_times(), n in 1usize..40, min in 1usize..40, f in 50.0..5000.0f64) {
        let events = events_at(&times, 7);
        let cfg = FrameConfig { frequency: f, n: n.max(min), min_events: min };
        let segments = segment_events(&events, &cfg);
        let kept: usize = segments.iter().map(|s| s.total).sum();
        prop_assert_eq!(kept, events.len());
        for s in segments.iter().filter(|s| !s.skipped) {
            prop_assert!(s.events.len() <= cfg.n && s.events.len() >= cfg.min_events);
        }
    }

    #[test]
    fn event_text_roundtrips(times in event_times(), seed in any::<u64>()) {
        let events = events_at(&times, seed);
        let mut text = String::new();
        for e in &events {
            format_event(&mut text, e);
        }
        let parsed = parse_event_stream(text.as_bytes(), 240, 180).unwrap();
        prop_assert_eq!(&parsed, &events);
        let mut again = String::new();
        for e in &parsed {
            format_event(&mut again, e);
        }
        prop_assert_eq!(again, text);
    }
}

// ES-ICP

/// Arcs of points on a patch of the sphere, shared by the alignment properties.
fn arc_map() -> &'static SphericalMap {
    static MAP: OnceLock<SphericalMap> = OnceLock::new();
    MAP.get_or_init(|| {
        let scene = Scene::edges(3, 6000, &SphereCap::new(Vec3::z(), 0.6), 0.0025, (0.05, 0.25));
        SphericalMap::from_points(&scene.landmarks, MapConfig::default()).unwrap()
    })
}

fn frame_from_map(map: &SphericalMap, truth: &Rotation, stride: usize) -> EventSphericalFrame {
    let inv = truth.inverse();
    let points = map
        .points()
        .iter()
        .filter(|p| p.vector().z > 0.9)
        .step_by(stride)
        .map(|p| p.rotated(&inv))
        .collect();
    EventSphericalFrame { t0: 0.0, points }
}

proptest! {
    #[test]
    fn jacobian_matches_central_differences(r in rotation(), p in unit(), d in unit(), c in vec3(1.0).prop_map(|v| v * 0.5)) {
        let corr = LineCorrespondence { p, d: *d.vector(), c };
        let j = jacobian(&r, &corr);
        let h = 1e-6;
        for axis in 0..3 {
            let mut delta = Vec3::zeros();
            delta[axis] = h;
            let plus = residual(&r.retract(&delta), &corr);
            let minus = residual(&r.retract(&(-delta)), &corr);
            let numeric = (plus - minus) / (2.0 * h);
            prop_assert!((numeric - j.column(axis)).amax() < 1e-5);
        }
    }

    #[test]
    fn residual_norm_is_line_distance(r in rotation(), p in unit(), d in unit(), c in vec3(1.0)) {
        let corr = LineCorrespondence { p, d: *d.vector(), c };
        let x = &r * p.vector() - c;
        let along = x.dot(d.vector());
        let distance = (x - d.vector() * along).norm();
        prop_assert!((residual(&r, &corr).norm() - distance).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alignment_commutes_with_global_rotation(g in rotation(), offset in axis_angle(0.0, 0.01)) {
        let map = arc_map();
        let frame = frame_from_map(map, &Rotation::identity(), 4);
        let cfg = IcpConfig::default();
        let init = Rotation::exp(&offset);
        let plain = align_frame(&frame, map, &init, &cfg).unwrap();

        let rotated: Vec<SphericalPoint> = map.points().iter().map(|p| p.rotated(&g)).collect();
        let rotated_map = SphericalMap::from_points(&rotated, MapConfig { voxel_size: 1e-9, ..MapConfig::default() }).unwrap();
        prop_assume!(rotated_map.len() == map.len());
        let moved = align_frame(&frame, &rotated_map, &(g * init), &cfg).unwrap();
        prop_assert!(moved.rotation.angle_to(&(g * plain.rotation)) < 1e-9);
        prop_assert!((moved.final_cost - plain.final_cost).abs() < 1e-12);
        prop_assert!(rotation_is_valid(&moved.rotation));
    }

    #[test]
    fn alignment_output_is_a_rotation(truth in axis_angle(0.0, 0.3), offset in axis_angle(0.0, 0.017)) {
        let map = arc_map();
        let truth = Rotation::exp(&truth);
        let frame = frame_from_map(map, &truth, 5);
        prop_assume!(frame.len() > 100);
        if let Ok(result) = align_frame(&frame, map, &(truth * Rotation::exp(&offset)), &IcpConfig::default()) {
            prop_assert!(rotation_is_valid(&result.rotation));
            prop_assert!(result.final_cost >= 0.0);
            prop_assert!(result.inlier_count <= frame.len());
        }
    }
}

// Spherical map

fn cluster(centre: SphericalPoint, spread: f64, count: usize, seed: u64) -> Vec<SphericalPoint> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let jitter = Vec3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread));
            SphericalPoint::from_vector(&(centre.vector() + jitter)).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn insertion_keeps_map_invariants(
        centre in unit(),
        rotations in prop::collection::vec(axis_angle(0.0, 0.2), 1..5),
        voxel in 0.002..0.05f64,
        seed in any::<u64>(),
    ) {
        let config = MapConfig { voxel_size: voxel, ..MapConfig::default() };
        let mut map = SphericalMap::new(config).unwrap();
        let frame = EventSphericalFrame { t0: 0.0, points: cluster(centre, 0.15, 400, seed) };
        for v in &rotations {
            let before: Vec<VoxelKey> = map.points().iter().map(|p| VoxelKey::of(p.vector(), voxel)).collect();
            map.insert_keyframe(&frame, &Rotation::exp(v));
            let mut after: Vec<VoxelKey> = map.points().iter().map(|p| VoxelKey::of(p.vector(), voxel)).collect();
            for p in map.points() {
                prop_assert!((p.vector().norm() - 1.0).abs() < 1e-12);
            }
            after.sort_unstable();
            let len = after.len();
            after.dedup();
            prop_assert_eq!(after.len(), len, "two points share a bucket");
            for key in before {
                prop_assert!(after.binary_search(&key).is_ok(), "bucket lost");
            }
        }
    }

    #[test]
    fn knn_matches_linear_scan(centre in unit(), seed in any::<u64>(), queries in prop::collection::vec(unit(), 20), k in 1usize..12) {
        let map = SphericalMap::from_points(&cluster(centre, 0.5, 500, seed), MapConfig::default()).unwrap();
        prop_assume!(map.len() >= k);
        for q in &queries {
            let got = map.knn_query(q, k).unwrap();
            let mut scan: Vec<(f64, usize)> =
                map.points().iter().enumerate().map(|(i, p)| ((q.vector() - p.vector()).norm_squared(), i)).collect();
            scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<SphericalPoint> = scan[..k].iter().map(|&(_, i)| map.points()[i]).collect();
            prop_assert_eq!(got, want);
        }
    }
}

// Panorama

proptest! {
    #[test]
    fn rendering_conserves_in_bounds_points(points in prop::collection::vec(unit(), 0..300), w in 1u32..300, h in 1u32..200, pct in 0.01..1.0f64) {
        let spec = PanoramaSpec { width: w, height: h, percentile: pct, ..PanoramaSpec::default() };
        let image = render_panorama(&points, &spec).unwrap();
        let inside = points
            .iter()
            .filter(|p| sphere_to_cylinder(p).ok().and_then(|c| cylinder_to_pixel(&c, &spec)).is_some())
            .count();
        prop_assert_eq!(image.total_count(), inside as u64);
        prop_assert_eq!(image.pixels.len(), (w * h) as usize);
        for (c, px) in image.counts.iter().zip(&image.pixels) {
            prop_assert_eq!(*c == 0, *px == 0);
        }
    }

    #[test]
    fn seam_neighbours_stay_close(delta in 1e-5..0.05f64, w in 10u32..4000, z in -0.5..0.5f64) {
        let spec = PanoramaSpec { width: w, ..PanoramaSpec::default() };
        let at = |a: f64| SphericalPoint::from_vector(&Vec3::new(a.cos(), a.sin(), z)).unwrap();
        let column = |p: SphericalPoint| cylinder_to_pixel(&sphere_to_cylinder(&p).unwrap(), &spec).unwrap().x.floor() as i64;
        let (a, b) = (column(at(-0.5 * delta)), column(at(0.5 * delta)));
        let gap = (a - b).rem_euclid(w as i64);
        let circular = gap.min(w as i64 - gap);
        prop_assert!(circular as f64 <= (delta / TAU * w as f64).ceil() + 1.0);
    }
}

// Evaluation

fn trajectory() -> impl Strategy<Value = RotationTrajectory> {
    (prop::collection::vec(axis_angle(0.0, 0.05), 20..120), rotation()).prop_map(|(steps, start)| {
        let mut r = start;
        let poses = steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                r = r.retract(s);
                StampedRotation::new(k as f64 * 0.01, r)
            })
            .collect();
        RotationTrajectory::new(poses).unwrap()
    })
}

fn perturbed(traj: &RotationTrajectory, noise: &[Vec3]) -> RotationTrajectory {
    let poses = traj
        .poses()
        .iter()
        .zip(noise.iter().cycle())
        .map(|(p, n)| StampedRotation::new(p.t, p.rotation.retract(n)))
        .collect();
    RotationTrajectory::new(poses).unwrap()
}

proptest! {
    #[test]
    fn metrics_are_non_negative_and_zero_on_self(gt in trajectory(), noise in prop::collection::vec(axis_angle(0.0, 0.02), 1..10)) {
        let est = perturbed(&gt, &noise);
        let pairs = associate(&est, &gt, 1e-3).unwrap().pairs;
        prop_assert!(mean_ape(&pairs, true) >= 0.0 && mean_ape(&pairs, false) >= 0.0);
        let same = associate(&gt, &gt, 1e-3).unwrap().pairs;
        prop_assert_eq!(mean_ape(&same, true), 0.0);
        prop_assert_eq!(mean_ape(&same, false), 0.0);
        if let Ok(rpe) = mean_rpe(&pairs, 10.0) {
            prop_assert!(rpe >= 0.0);
            prop_assert_eq!(mean_rpe(&same, 10.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn rpe_ignores_global_rotation(gt in trajectory(), noise in prop::collection::vec(axis_angle(0.0, 0.02), 1..10), g in rotation()) {
        let est = perturbed(&gt, &noise);
        let pairs = associate(&est, &gt, 1e-3).unwrap().pairs;
        let moved = associate(&est.pre_rotated(&g), &gt, 1e-3).unwrap().pairs;
        if let Ok(rpe) = mean_rpe(&pairs, 10.0) {
            prop_assert!((mean_rpe(&moved, 10.0).unwrap() - rpe).abs() < 1e-9);
        }
    }

    #[test]
    fn aligned_ape_ignores_global_rotation(gt in trajectory(), noise in prop::collection::vec(axis_angle(0.0, 0.02), 1..10), g in axis_angle(0.05, PI - 1e-3)) {
        let g = Rotation::exp(&g);
        let est = perturbed(&gt, &noise);
        let pairs = associate(&est, &gt, 1e-3).unwrap().pairs;
        let moved = associate(&est.pre_rotated(&g), &gt, 1e-3).unwrap().pairs;
        prop_assert!((mean_ape(&moved, true) - mean_ape(&pairs, true)).abs() < 1e-9);
        let shift = mean_ape(&moved, false) - mean_ape(&pairs, false);
        prop_assert!(shift.abs() > 1e-3, "unaligned APE should see the global rotation");
    }

    #[test]
    fn ape_is_mean_radians_in_degrees(gt in trajectory(), noise in prop::collection::vec(axis_angle(0.0, 0.02), 1..10)) {
        let est = perturbed(&gt, &noise);
        let pairs = associate(&est, &gt, 1e-3).unwrap().pairs;
        let radians: f64 = pairs.iter().map(|(e, t)| e.rotation.angle_to(&t.rotation)).sum::<f64>() / pairs.len() as f64;
        prop_assert_eq!(mean_ape(&pairs, false), radians * (180.0 / PI));
    }
}

// Simulator

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn events_lie_near_their_landmarks(seed in any::<u64>(), rate in axis_angle(0.5, 6.0), threshold in 0.5..3.0f64) {
        let scene = Scene::uniform_cap(seed, 300, &SphereCap::new(Vec3::z(), 0.6));
        let profile = MotionProfile::constant_rate(rate, 0.04);
        let cam = camera();
        let config = SimConfig { pixel_threshold: threshold, ..SimConfig::default() };
        let sim = EventSimulator::new(&scene, profile, cam.clone(), config).unwrap();
        let pitch = 1.1 / cam.fx.min(cam.fy);
        let bound = pitch * (1.0 + threshold);
        let mut last = f64::NEG_INFINITY;
        let mut count = 0;
        for e in sim.labelled() {
            let Ok(e) = e else { break };
            prop_assert!(e.event.t >= last);
            last = e.event.t;
            prop_assert!((e.event.u as u32) < cam.width && (e.event.v as u32) < cam.height);
            let bearing = cam.pixel_to_sphere(&Vec2::new(e.event.u as f64, e.event.v as f64)).unwrap();
            let world = bearing.rotated(&profile.trajectory_at(e.event.t).unwrap());
            prop_assert!(world.angle_to(&scene.landmarks[e.landmark as usize]) <= bound);
            count += 1;
        }
        prop_assert!(count > 0);
    }
}
