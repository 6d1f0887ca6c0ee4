use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radleg::geom::{Mat3, Vec3};
use radleg::io_dataset::synth::{synth_scan, PointLabel, ScanSpec};
use radleg::radar_ego::{
    estimate_ego_velocity, ransac_xy, ransac_xz, RadarPoint, RadarScan, RansacParams,
};

/// Doppler of a static point seen from a sensor moving at `v`.
fn doppler(p: &Vec3, v: &Vec3) -> f64 {
    -(p.x * v.x + p.y * v.y + p.z * v.z) / (p.x * p.x + p.y * p.y + p.z * p.z).sqrt()
}

fn point_in_fov(rng: &mut ChaCha8Rng) -> Vec3 {
    let r = rng.random_range(1.0..15.0);
    let az = rng.random_range(-1.0..1.0);
    let el = rng.random_range(-0.5..0.5);
    Vec3::new(
        r * f64::cos(el) * f64::cos(az),
        r * f64::cos(el) * f64::sin(az),
        r * f64::sin(el),
    )
}

fn static_scan(v: &Vec3, n: usize, seed: u64) -> RadarScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let p = point_in_fov(&mut rng);
            RadarPoint {
                position: p,
                doppler: doppler(&p, v),
                intensity: -1.0,
            }
        })
        .collect();
    RadarScan {
        timestamp: 1.0,
        points,
    }
}

/// A height error only shows in the Doppler residual when it turns the line
/// of sight enough, so the oracle splits the corrupted points by their
/// residual at the true velocity: clearly inconsistent ones must go, and `v_z`
/// must match a fit over the points that remain consistent.
#[test]
fn xz_stage_removes_wrong_elevations() {
    let v = Vec3::new(1.0, 0.0, 0.3);
    let params = RansacParams::default();
    let thr = params.inlier_threshold_xz;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut points = Vec::new();
    let mut detectable = Vec::new();
    let mut consistent = Vec::new();
    for k in 0..200 {
        let p = point_in_fov(&mut rng);
        let d = doppler(&p, &v);
        let shown = if k < 150 {
            consistent.push(k);
            p
        } else {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let q = p + Vec3::new(0.0, 0.0, 2.0 * sign);
            let e = (d - doppler(&q, &v)).abs();
            if e > 2.0 * thr {
                detectable.push(k);
            } else if e <= thr {
                consistent.push(k);
            }
            q
        };
        points.push(RadarPoint {
            position: shown,
            doppler: d,
            intensity: -1.0,
        });
    }
    let scan = RadarScan {
        timestamp: 0.0,
        points,
    };
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &consistent {
        let p = &scan.points[i].position;
        let r = p.norm();
        num -= p.z / r * (scan.points[i].doppler + (p.x * v.x + p.y * v.y) / r);
        den += (p.z / r).powi(2);
    }
    let vz_oracle = num / den;

    let xy = ransac_xy(&scan, &params).unwrap();
    let xz = ransac_xz(&scan, &xy.inliers, xy.vx, xy.vy, &params).unwrap();
    assert!(!detectable.is_empty());
    assert!(xz.inliers.iter().all(|i| xy.inliers.contains(i)));
    assert!(detectable.iter().all(|i| !xz.inliers.contains(i)));
    assert!((0..150).all(|i| xz.inliers.contains(&i)));
    assert!(
        (xz.vz - vz_oracle).abs() < 2e-2,
        "v_z {} oracle {vz_oracle}",
        xz.vz
    );
}

#[test]
fn full_pipeline_with_mixed_outliers() {
    let v = Vec3::new(0.8, -0.3, 0.15);
    let spec = ScanSpec {
        velocity: v,
        static_points: 160,
        outlier_fraction: 0.2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let (scan, _) = synth_scan(&spec, 0.0, &mut rng);
    let est = estimate_ego_velocity(&scan, &RansacParams::default());
    assert!(est.valid);
    for k in 0..3 {
        assert!((est.v_hat[k] - v[k]).abs() < 2e-2, "{:?}", est.v_hat);
    }
}

#[test]
fn dominant_moving_object_wins_consensus() {
    // 70% of the points sit on one large object moving at `u`; the sensor
    // then sees an apparent velocity of `v - u`.
    let v = Vec3::new(0.5, 0.0, 0.0);
    let u = Vec3::new(0.0, 1.2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let points = (0..150)
        .map(|k| {
            let p = point_in_fov(&mut rng);
            let rel = if k < 105 { v - u } else { v };
            RadarPoint {
                position: p,
                doppler: doppler(&p, &rel),
                intensity: -1.0,
            }
        })
        .collect();
    let scan = RadarScan {
        timestamp: 0.0,
        points,
    };
    let est = estimate_ego_velocity(&scan, &RansacParams::default());
    assert!(est.valid);
    // Static points seen along directions where `u` has no radial component
    // agree with both motions, so the fit is close to, not exactly, `v - u`.
    assert!((est.v_hat - (v - u)).norm() < 2e-2, "{:?}", est.v_hat);
}

#[test]
fn seeded_scans_recover_velocity() {
    let params = RansacParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let mut good = 0;
    for k in 0..30 {
        let v = Vec3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        );
        let spec = ScanSpec {
            velocity: v,
            doppler_sigma: 0.02,
            ..Default::default()
        };
        let (scan, labels) = synth_scan(&spec, k as f64 * 0.05, &mut rng);
        assert_eq!(labels.len(), scan.points.len());
        let est = estimate_ego_velocity(&scan, &params);
        if est.valid && (0..3).all(|a| (est.v_hat[a] - v[a]).abs() < 0.05) {
            good += 1;
        }
        let clutter_kept = labels
            .iter()
            .zip(&est.inlier_mask)
            .filter(|(l, &m)| **l == PointLabel::Clutter && m)
            .count();
        assert!(
            clutter_kept <= 3,
            "scan {k}: {clutter_kept} clutter points kept"
        );
    }
    assert!(good >= 29, "{good} of 30 scans within 0.05 m/s");
}

fn rotate_yaw(p: &Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}

fn arb_velocity() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -0.5..0.5f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_scans_recovered_in_any_order(v in arb_velocity(), seed in 0u64..1000, shift in 1usize..60) {
        let mut scan = static_scan(&v, 60, seed);
        let params = RansacParams::default();
        let a = estimate_ego_velocity(&scan, &params);
        scan.points.rotate_left(shift);
        let b = estimate_ego_velocity(&scan, &params);
        prop_assert!(a.valid && b.valid);
        prop_assert!((a.v_hat - v).norm() < 1e-8);
        prop_assert!((b.v_hat - v).norm() < 1e-8);
    }

    #[test]
    fn yaw_rotation_is_equivariant(v in arb_velocity(), seed in 0u64..1000, yaw in -3.0..3.0f64) {
        let scan = static_scan(&v, 60, seed);
        let rotated = RadarScan {
            timestamp: scan.timestamp,
            points: scan
                .points
                .iter()
                .map(|p| RadarPoint { position: rotate_yaw(&p.position, yaw), ..*p })
                .collect(),
        };
        let params = RansacParams::default();
        let a = estimate_ego_velocity(&scan, &params);
        let b = estimate_ego_velocity(&rotated, &params);
        prop_assert!((rotate_yaw(&a.v_hat, yaw) - b.v_hat).norm() < 1e-8);
    }

    #[test]
    fn inlier_sets_nest_and_covariance_is_spd(v in arb_velocity(), seed in 0u64..1000) {
        let spec = ScanSpec { velocity: v, doppler_sigma: 0.05, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scan, _) = synth_scan(&spec, 0.0, &mut rng);
        let params = RansacParams::default();
        let xy = ransac_xy(&scan, &params).unwrap();
        prop_assert!(xy.inliers.iter().all(|&i| i < scan.points.len()));
        let xz = ransac_xz(&scan, &xy.inliers, xy.vx, xy.vy, &params).unwrap();
        prop_assert!(xz.inliers.iter().all(|i| xy.inliers.contains(i)));
        let est = estimate_ego_velocity(&scan, &params);
        prop_assert!(est.valid);
        let c: Mat3 = est.covariance;
        prop_assert!((c - c.transpose()).norm() < 1e-15);
        prop_assert!(c.symmetric_eigenvalues().min() > 0.0);
        for (i, &m) in est.inlier_mask.iter().enumerate() {
            if m {
                prop_assert!(xz.inliers.contains(&i));
            }
        }
    }
}
