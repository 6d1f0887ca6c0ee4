//! Trajectory accuracy metrics: absolute and relative trajectory error with
//! position-and-yaw alignment.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geom::{yaw_of, Rot3, Vec3};
use crate::io_dataset::{Pose, Trajectory};

/// Maximum timestamp gap for associating an estimated pose with a reference pose.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
pub const DEFAULT_SUB_LENGTH: f64 = 10.0;
pub const CSV_HEADER: &str = "ate_t,ate_r,rte_t,rte_r,ate_z,align,sub_length";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("only {0} associated pose pairs, need at least 2")]
    InsufficientOverlap(usize),
    #[error(
        "reference path of {length:.3} m is shorter than the sub-trajectory length {sub_length} m"
    )]
    TooShort { length: f64, sub_length: f64 },
    #[error("unknown alignment `{0}` (expected posyaw or none)")]
    UnknownAlignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    #[default]
    PosYaw,
    None,
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::PosYaw => "posyaw",
            Alignment::None => "none",
        })
    }
}

impl FromStr for Alignment {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posyaw" => Ok(Alignment::PosYaw),
            "none" => Ok(Alignment::None),
            _ => Err(MetricsError::UnknownAlignment(s.to_string())),
        }
    }
}

/// Rotation about z followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawTransform {
    pub yaw: f64,
    pub translation: Vec3,
}

impl Default for YawTransform {
    fn default() -> Self {
        YawTransform {
            yaw: 0.0,
            translation: Vec3::zeros(),
        }
    }
}

impl YawTransform {
    pub fn rotation(&self) -> Rot3 {
        Rot3::rz(self.yaw)
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        let r = self.rotation();
        Pose {
            timestamp: pose.timestamp,
            p: r * pose.p + self.translation,
            r: r * pose.r,
        }
    }

    pub fn apply_all(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            poses: traj.poses.iter().map(|p| self.apply(p)).collect(),
        }
    }
}

/// Pairs of (estimate, reference) poses matched by nearest timestamp.
#[derive(Debug, Clone, Default)]
pub struct Association {
    pub pairs: Vec<(Pose, Pose)>,
    pub unmatched: usize,
}

pub fn associate(est: &Trajectory, reference: &Trajectory) -> Association {
    let refs = &reference.poses;
    let mut out = Association::default();
    for e in &est.poses {
        let idx = refs.partition_point(|r| r.timestamp < e.timestamp);
        let best = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&k| k < refs.len())
            .min_by(|&a, &b| {
                let da = (refs[a].timestamp - e.timestamp).abs();
                let db = (refs[b].timestamp - e.timestamp).abs();
                da.total_cmp(&db)
            });
        match best {
            Some(k) if (refs[k].timestamp - e.timestamp).abs() <= ASSOCIATION_WINDOW => {
                out.pairs.push((*e, refs[k]));
            }
            _ => out.unmatched += 1,
        }
    }
    out
}

/// Least-squares yaw and translation mapping estimated positions onto the
/// reference positions.
pub fn align_posyaw_pairs(pairs: &[(Pose, Pose)]) -> Result<YawTransform, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::InsufficientOverlap(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|(e, _)| e.p).sum::<Vec3>() / n;
    let mu_r = pairs.iter().map(|(_, r)| r.p).sum::<Vec3>() / n;
    let (mut s_cos, mut s_sin) = (0.0, 0.0);
    for (e, r) in pairs {
        let a = e.p - mu_e;
        let b = r.p - mu_r;
        s_cos += a.x * b.x + a.y * b.y;
        s_sin += a.x * b.y - a.y * b.x;
    }
    let yaw = s_sin.atan2(s_cos);
    let translation = mu_r - Rot3::rz(yaw) * mu_e;
    Ok(YawTransform { yaw, translation })
}

pub fn align_posyaw(
    est: &Trajectory,
    reference: &Trajectory,
) -> Result<YawTransform, MetricsError> {
    align_posyaw_pairs(&associate(est, reference).pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsoluteError {
    /// m
    pub ate_t: f64,
    /// deg
    pub ate_r: f64,
    /// m
    pub ate_z: f64,
    pub transform: YawTransform,
    pub matched: usize,
    pub unmatched: usize,
}

pub fn ate(
    est: &Trajectory,
    reference: &Trajectory,
    alignment: Alignment,
) -> Result<AbsoluteError, MetricsError> {
    let assoc = associate(est, reference);
    if assoc.pairs.len() < 2 {
        return Err(MetricsError::InsufficientOverlap(assoc.pairs.len()));
    }
    let transform = match alignment {
        Alignment::PosYaw => align_posyaw_pairs(&assoc.pairs)?,
        Alignment::None => YawTransform::default(),
    };
    let n = assoc.pairs.len() as f64;
    let (mut st, mut sr, mut sz) = (0.0, 0.0, 0.0);
    for (e, r) in &assoc.pairs {
        let a = transform.apply(e);
        let d = a.p - r.p;
        st += d.norm_squared();
        sz += d.z * d.z;
        sr += a.r.angle_to(&r.r).powi(2);
    }
    Ok(AbsoluteError {
        ate_t: (st / n).sqrt(),
        ate_r: (sr / n).sqrt().to_degrees(),
        ate_z: (sz / n).sqrt(),
        transform,
        matched: assoc.pairs.len(),
        unmatched: assoc.unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeError {
    /// m
    pub rte_t: f64,
    /// deg
    pub rte_r: f64,
    pub segments: usize,
}

/// Relative error over sub-trajectories of `sub_length` metres of reference
/// path. Each sub-trajectory is aligned at its first pose by position and yaw
/// and scored at its last pose.
pub fn rte(
    est: &Trajectory,
    reference: &Trajectory,
    sub_length: f64,
) -> Result<RelativeError, MetricsError> {
    let pairs = associate(est, reference).pairs;
    if pairs.len() < 2 {
        return Err(MetricsError::InsufficientOverlap(pairs.len()));
    }
    let mut dist = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in pairs.windows(2) {
        acc += (w[1].1.p - w[0].1.p).norm();
        dist.push(acc);
    }
    if acc < sub_length {
        return Err(MetricsError::TooShort {
            length: acc,
            sub_length,
        });
    }
    let (mut st, mut sr, mut count) = (0.0, 0.0, 0usize);
    let mut end = 0;
    for start in 0..pairs.len() {
        end = end.max(start);
        while end < pairs.len() && dist[end] - dist[start] < sub_length {
            end += 1;
        }
        if end == pairs.len() {
            break;
        }
        let (e0, r0) = &pairs[start];
        let (e1, r1) = &pairs[end];
        let yaw = yaw_of(&r0.r) - yaw_of(&e0.r);
        let rz = Rot3::rz(yaw);
        let t = YawTransform {
            yaw,
            translation: r0.p - rz * e0.p,
        };
        let a = t.apply(e1);
        st += (a.p - r1.p).norm_squared();
        sr += a.r.angle_to(&r1.r).powi(2);
        count += 1;
    }
    let n = count as f64;
    Ok(RelativeError {
        rte_t: (st / n).sqrt(),
        rte_r: (sr / n).sqrt().to_degrees(),
        segments: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ate_t: f64,
    pub ate_r: f64,
    pub rte_t: f64,
    pub rte_r: f64,
    pub ate_z: f64,
    pub align: Alignment,
    pub sub_length: f64,
    pub matched: usize,
    pub unmatched: usize,
}

impl MetricsReport {
    /// ATE and RTE together. RTE is NaN when the reference path is shorter
    /// than `sub_length`.
    pub fn compute(
        est: &Trajectory,
        reference: &Trajectory,
        align: Alignment,
        sub_length: f64,
    ) -> Result<Self, MetricsError> {
        let a = ate(est, reference, align)?;
        let (rte_t, rte_r) = match rte(est, reference, sub_length) {
            Ok(r) => (r.rte_t, r.rte_r),
            Err(MetricsError::TooShort { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            ate_t: a.ate_t,
            ate_r: a.ate_r,
            rte_t,
            rte_r,
            ate_z: a.ate_z,
            align,
            sub_length,
            matched: a.matched,
            unmatched: a.unmatched,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.ate_t, self.ate_r, self.rte_t, self.rte_r, self.ate_z, self.align, self.sub_length
        )
    }

    pub fn table(&self) -> String {
        format!(
            "ATE_t  {:>10.4} m\nATE_r  {:>10.4} deg\nATE_z  {:>10.4} m\n\
             RTE_t  {:>10.4} m   (per {} m)\nRTE_r  {:>10.4} deg\n\
             pairs  {:>10} matched, {} unmatched, align {}",
            self.ate_t,
            self.ate_r,
            self.ate_z,
            self.rte_t,
            self.sub_length,
            self.rte_r,
            self.matched,
            self.unmatched,
            self.align
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory {
            poses: (0..n)
                .map(|k| Pose {
                    timestamp: k as f64 * 0.1,
                    p: Vec3::new(k as f64 * step, 0.0, 0.0),
                    r: Rot3::identity(),
                })
                .collect(),
        }
    }

    fn wiggle(n: usize) -> Trajectory {
        Trajectory {
            poses: (0..n)
                .map(|k| {
                    let s = k as f64 * 0.1;
                    Pose {
                        timestamp: s,
                        p: Vec3::new(s * 2.0, (s * 0.7).sin() * 3.0, 0.2 * s.cos()),
                        r: Rot3::rz(0.3 * s) * Rot3::rx(0.05 * s.sin()),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn identical_trajectories_zero() {
        let t = wiggle(100);
        let a = ate(&t, &t, Alignment::PosYaw).unwrap();
        assert!(a.ate_t < 1e-12 && a.ate_r < 1e-6 && a.ate_z < 1e-12);
        let r = rte(&t, &t, 5.0).unwrap();
        assert!(r.rte_t < 1e-12 && r.rte_r < 1e-6);
    }

    #[test]
    fn shift_recovers_negative_translation() {
        let t = wiggle(50);
        let shifted = YawTransform {
            yaw: 0.0,
            translation: Vec3::new(1.0, 2.0, 3.0),
        }
        .apply_all(&t);
        let tr = align_posyaw(&shifted, &t).unwrap();
        assert_relative_eq!(tr.translation, Vec3::new(-1.0, -2.0, -3.0), epsilon = 1e-12);
        assert!(tr.yaw.abs() < 1e-12);
    }

    #[test]
    fn yaw_and_offset_recovered() {
        let t = wiggle(80);
        let g = YawTransform {
            yaw: 30f64.to_radians(),
            translation: Vec3::new(-4.0, 1.5, 0.25),
        };
        let moved = g.apply_all(&t);
        let tr = align_posyaw(&moved, &t).unwrap();
        let back = tr.apply_all(&moved);
        for (a, b) in back.poses.iter().zip(&t.poses) {
            assert!((a.p - b.p).norm() < 1e-9);
        }
        assert!((tr.yaw + 30f64.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn constant_z_offset_without_alignment() {
        let t = wiggle(40);
        let up = YawTransform {
            yaw: 0.0,
            translation: Vec3::new(0.0, 0.0, 0.5),
        }
        .apply_all(&t);
        let a = ate(&up, &t, Alignment::None).unwrap();
        assert_relative_eq!(a.ate_t, 0.5, epsilon = 1e-12);
        assert_relative_eq!(a.ate_z, 0.5, epsilon = 1e-12);
        assert_eq!(a.ate_r, 0.0);
    }

    #[test]
    fn uniform_scale_rte() {
        let reference = line(101, 1.0);
        let est = line(101, 0.9);
        let r = rte(&est, &reference, 10.0).unwrap();
        assert_relative_eq!(r.rte_t, 1.0, epsilon = 1e-12);
        assert_eq!(r.segments, 91);
    }

    #[test]
    fn too_short_and_no_overlap() {
        let t = line(5, 1.0);
        assert!(matches!(
            rte(&t, &t, 10.0),
            Err(MetricsError::TooShort { .. })
        ));
        let mut late = t.clone();
        for p in &mut late.poses {
            p.timestamp += 100.0;
        }
        assert_eq!(
            ate(&late, &t, Alignment::PosYaw),
            Err(MetricsError::InsufficientOverlap(0))
        );
    }

    #[test]
    fn association_window() {
        let reference = line(10, 1.0);
        let mut est = reference.clone();
        est.poses[3].timestamp += 0.019;
        est.poses[5].timestamp += 0.05;
        let a = associate(&est, &reference);
        assert_eq!(a.pairs.len(), 9);
        assert_eq!(a.unmatched, 1);
    }

    #[test]
    fn alignment_names_parse() {
        assert_eq!("posyaw".parse::<Alignment>().unwrap(), Alignment::PosYaw);
        assert_eq!("none".parse::<Alignment>().unwrap(), Alignment::None);
        assert!("se3".parse::<Alignment>().is_err());
        assert_eq!(Alignment::PosYaw.to_string(), "posyaw");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn shifted_wiggle(yaw: f64, t: Vec3, n: usize) -> (Trajectory, Trajectory) {
            let reference = wiggle(n);
            let est = YawTransform {
                yaw,
                translation: t,
            }
            .apply_all(&reference);
            (est, reference)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn posyaw_ate_ignores_a_rigid_yaw_shift(
                yaw in -3.1..3.1f64,
                x in -50.0..50.0f64,
                y in -50.0..50.0f64,
                z in -5.0..5.0f64,
                n in 20usize..80,
            ) {
                let (est, reference) = shifted_wiggle(yaw, Vec3::new(x, y, z), n);
                let a = ate(&est, &reference, Alignment::PosYaw).unwrap();
                prop_assert!(a.ate_t < 1e-9);
                prop_assert!(a.ate_r < 1e-6);
            }

            #[test]
            fn rte_ignores_a_rigid_yaw_shift(yaw in -3.1..3.1f64, x in -50.0..50.0f64, n in 40usize..80) {
                let (est, reference) = shifted_wiggle(yaw, Vec3::new(x, 0.0, 0.0), n);
                let r = rte(&est, &reference, 3.0).unwrap();
                prop_assert!(r.segments > 0);
                prop_assert!(r.rte_t < 1e-9);
            }

            #[test]
            fn ate_z_never_exceeds_ate_t(dz in -1.0..1.0f64, dy in -1.0..1.0f64, n in 20usize..60) {
                let reference = wiggle(n);
                let est = Trajectory {
                    poses: reference
                        .poses
                        .iter()
                        .enumerate()
                        .map(|(k, p)| Pose {
                            p: p.p + Vec3::new(0.0, dy * (k as f64 * 0.3).sin(), dz * k as f64 / n as f64),
                            ..*p
                        })
                        .collect(),
                };
                let a = ate(&est, &reference, Alignment::PosYaw).unwrap();
                prop_assert!(a.ate_z <= a.ate_t + 1e-15);
                let b = ate(&est, &reference, Alignment::None).unwrap();
                prop_assert!(a.ate_t <= b.ate_t + 1e-12);
            }
        }
    }
}
