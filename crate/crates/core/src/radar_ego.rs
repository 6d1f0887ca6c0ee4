//! Per-scan ego-velocity from Doppler returns of a single radar.
//!
//! Two consensus stages run in sequence. The first fits the horizontal
//! velocity `(v_x, v_y)` to the azimuthal sinusoid traced by static points and
//! discards dynamic objects and clutter. The second holds `(v_x, v_y)` fixed and
//! fits `v_z` alone, which exposes points whose elevation is wrong. A linear
//! least-squares solve over the surviving points gives the 3D velocity.
//!
//! Sign convention: a static point at unit direction `d` seen from a sensor
//! moving with velocity `v` reports `doppler = -d . v`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Mat3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EgoError {
    #[error("degenerate scan: {0}")]
    Degenerate(String),
    #[error("rank deficient geometry (condition number {cond:.3e})")]
    RankDeficient { cond: f64 },
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// Sensor frame, metres.
    pub position: Vec3,
    /// Radial velocity, m/s, positive when receding.
    pub doppler: f64,
    /// dB, -1 when the sensor does not report it.
    pub intensity: f64,
}

impl RadarPoint {
    pub fn new(position: Vec3, doppler: f64) -> Self {
        RadarPoint {
            position,
            doppler,
            intensity: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarScan {
    pub timestamp: f64,
    pub points: Vec<RadarPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub max_iterations_xy: usize,
    pub max_iterations_xz: usize,
    /// m/s
    pub inlier_threshold_xy: f64,
    /// m/s
    pub inlier_threshold_xz: f64,
    pub min_points: usize,
    pub min_inlier_ratio: f64,
    /// Doppler noise used for the output covariance, m/s.
    pub doppler_sigma: f64,
    /// Run the z-directional stage. Disabling it feeds the horizontal consensus
    /// set straight into the least-squares solve.
    pub xz_stage: bool,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            max_iterations_xy: 100,
            max_iterations_xz: 50,
            inlier_threshold_xy: 0.15,
            inlier_threshold_xz: 0.15,
            min_points: 5,
            min_inlier_ratio: 0.2,
            doppler_sigma: 0.1,
            xz_stage: true,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), EgoError> {
        if !(self.inlier_threshold_xy > 0.0 && self.inlier_threshold_xz > 0.0) {
            return Err(EgoError::InvalidParams(
                "thresholds must be positive".into(),
            ));
        }
        if self.min_points < 3 {
            return Err(EgoError::InvalidParams(
                "min_points must be at least 3".into(),
            ));
        }
        if !(self.min_inlier_ratio > 0.0 && self.min_inlier_ratio <= 1.0) {
            return Err(EgoError::InvalidParams(
                "min_inlier_ratio must be in (0, 1]".into(),
            ));
        }
        if !(self.doppler_sigma > 0.0) {
            return Err(EgoError::InvalidParams(
                "doppler_sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of the horizontal stage.
#[derive(Debug, Clone, PartialEq)]
pub struct XyFit {
    pub vx: f64,
    pub vy: f64,
    pub inliers: Vec<usize>,
}

/// Result of the vertical stage.
#[derive(Debug, Clone, PartialEq)]
pub struct XzFit {
    pub vz: f64,
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EgoDiagnostics {
    pub usable_points: usize,
    pub xy_inliers: usize,
    pub xz_inliers: usize,
    /// The vertical stage found no consensus; `v_z` came from the plain solve
    /// over the horizontal inliers and the covariance was inflated.
    pub xz_degenerate: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoVelEstimate {
    pub timestamp: f64,
    /// Sensor-frame velocity, m/s.
    pub v_hat: Vec3,
    pub inlier_mask: Vec<bool>,
    /// m^2/s^2
    pub covariance: Mat3,
    pub valid: bool,
    pub diagnostics: EgoDiagnostics,
}

impl EgoVelEstimate {
    pub fn invalid(scan: &RadarScan, reason: impl Into<String>) -> Self {
        EgoVelEstimate {
            timestamp: scan.timestamp,
            v_hat: Vec3::zeros(),
            inlier_mask: vec![false; scan.points.len()],
            covariance: Mat3::identity() * 1e6,
            valid: false,
            diagnostics: EgoDiagnostics {
                failure: Some(reason.into()),
                ..Default::default()
            },
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Factor applied to the covariance when the vertical stage degenerates.
const XZ_DEGENERATE_INFLATION: f64 = 100.0;
const REFINE_ROUNDS: usize = 5;
const CONDITION_LIMIT: f64 = 1e8;

/// Deterministic RNG seed derived from a scan timestamp.
pub fn scan_seed(timestamp: f64) -> u64 {
    timestamp.to_bits() ^ 0x9e37_79b9_7f4a_7c15
}

fn unit_dir(p: &Vec3) -> Vec3 {
    p / p.norm()
}

fn xy_residual(pt: &RadarPoint, vx: f64, vy: f64) -> f64 {
    let r = pt.position.norm();
    pt.doppler + (pt.position.x * vx + pt.position.y * vy) / r
}

fn full_residual(pt: &RadarPoint, v: &Vec3) -> f64 {
    pt.doppler + unit_dir(&pt.position).dot(v)
}

/// Least squares for `(v_x, v_y)` over `idx`; `None` when the 2x2 system is singular.
fn refit_xy(points: &[RadarPoint], idx: &[usize]) -> Option<(f64, f64)> {
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for &i in idx {
        let p = &points[i].position;
        let r = p.norm();
        let a = Vector2::new(p.x / r, p.y / r);
        ata += a * a.transpose();
        atb -= a * points[i].doppler;
    }
    if ata.determinant().abs() < 1e-12 {
        return None;
    }
    ata.lu().solve(&atb).map(|s| (s.x, s.y))
}

fn xy_consensus(points: &[RadarPoint], usable: &[usize], vx: f64, vy: f64, thr: f64) -> Vec<usize> {
    usable
        .iter()
        .copied()
        .filter(|&i| xy_residual(&points[i], vx, vy).abs() <= thr)
        .collect()
}

/// Horizontal-stage RANSAC: two-point hypotheses for `(v_x, v_y)` scored
/// against `doppler = -(x v_x + y v_y) / |p|`, then refit over the consensus set.
pub fn ransac_xy(scan: &RadarScan, params: &RansacParams) -> Result<XyFit, EgoError> {
    params.validate()?;
    let pts = &scan.points;
    let usable: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            let p = &pts[i].position;
            p.iter().all(|c| c.is_finite()) && pts[i].doppler.is_finite() && p.xy().norm() > 1e-9
        })
        .collect();
    if usable.len() < params.min_points {
        return Err(EgoError::Degenerate(format!(
            "{} usable points, need {}",
            usable.len(),
            params.min_points
        )));
    }

    let thr = params.inlier_threshold_xy;
    let mut rng = ChaCha8Rng::seed_from_u64(scan_seed(scan.timestamp));
    let mut best: Option<(usize, f64, f64, f64)> = None; // (count, score, vx, vy)
    for _ in 0..params.max_iterations_xy {
        let a = usable[rng.random_range(0..usable.len())];
        let b = usable[rng.random_range(0..usable.len())];
        if a == b {
            continue;
        }
        let Some((vx, vy)) = refit_xy(pts, &[a, b]) else {
            continue;
        };
        let mut count = 0;
        let mut score = 0.0;
        for &i in &usable {
            let e = xy_residual(&pts[i], vx, vy).abs();
            if e <= thr {
                count += 1;
                score += e;
            }
        }
        let better = match best {
            None => true,
            Some((c, s, _, _)) => count > c || (count == c && score < s),
        };
        if better {
            best = Some((count, score, vx, vy));
            if count == usable.len() {
                break;
            }
        }
    }
    let Some((_, _, mut vx, mut vy)) = best else {
        return Err(EgoError::Degenerate("no valid two-point hypothesis".into()));
    };

    let mut inliers = xy_consensus(pts, &usable, vx, vy, thr);
    for _ in 0..REFINE_ROUNDS {
        if inliers.len() < 2 {
            break;
        }
        let Some((nx, ny)) = refit_xy(pts, &inliers) else {
            break;
        };
        vx = nx;
        vy = ny;
        let next = xy_consensus(pts, &usable, vx, vy, thr);
        if next == inliers {
            break;
        }
        inliers = next;
    }

    let ratio = inliers.len() as f64 / usable.len() as f64;
    if inliers.len() < 2 || ratio < params.min_inlier_ratio {
        return Err(EgoError::Degenerate(format!(
            "horizontal consensus {} of {} points",
            inliers.len(),
            usable.len()
        )));
    }
    Ok(XyFit { vx, vy, inliers })
}

fn xz_consensus(points: &[RadarPoint], candidates: &[usize], v: &Vec3, thr: f64) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| full_residual(&points[i], v).abs() <= thr)
        .collect()
}

/// One-dimensional least squares for `v_z` with the horizontal part held fixed.
fn refit_vz(points: &[RadarPoint], idx: &[usize], vx: f64, vy: f64) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in idx {
        let p = &points[i].position;
        let r = p.norm();
        let dz = p.z / r;
        let rhs = points[i].doppler + (p.x * vx + p.y * vy) / r;
        num -= dz * rhs;
        den += dz * dz;
    }
    (den > 1e-12).then(|| num / den)
}

/// Vertical-stage RANSAC over the horizontal inliers with `(v_x, v_y)` fixed.
/// Each hypothesis comes from a single point; the returned inliers are a
/// subset of `xy_inliers`.
pub fn ransac_xz(
    scan: &RadarScan,
    xy_inliers: &[usize],
    vx: f64,
    vy: f64,
    params: &RansacParams,
) -> Result<XzFit, EgoError> {
    params.validate()?;
    if xy_inliers.is_empty() {
        return Err(EgoError::Degenerate("no horizontal inliers".into()));
    }
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(EgoError::Degenerate(
            "non-finite horizontal velocity".into(),
        ));
    }
    let pts = &scan.points;
    let thr = params.inlier_threshold_xz;
    let samplable: Vec<usize> = xy_inliers
        .iter()
        .copied()
        .filter(|&i| pts[i].position.z.abs() > 1e-6 * pts[i].position.norm())
        .collect();

    let mut vz = 0.0;
    if !samplable.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(scan_seed(scan.timestamp).rotate_left(17));
        let mut best: Option<(usize, f64, f64)> = None;
        let n_iter = params.max_iterations_xz.max(1);
        for _ in 0..n_iter {
            let i = samplable[rng.random_range(0..samplable.len())];
            let p = &pts[i].position;
            let r = p.norm();
            let cand = -(pts[i].doppler * r + p.x * vx + p.y * vy) / p.z;
            let v = Vec3::new(vx, vy, cand);
            let mut count = 0;
            let mut score = 0.0;
            for &j in xy_inliers {
                let e = full_residual(&pts[j], &v).abs();
                if e <= thr {
                    count += 1;
                    score += e;
                }
            }
            let better = match best {
                None => true,
                Some((c, s, _)) => count > c || (count == c && score < s),
            };
            if better {
                best = Some((count, score, cand));
            }
        }
        vz = best.map(|b| b.2).unwrap_or(0.0);
    }

    let mut inliers = xz_consensus(pts, xy_inliers, &Vec3::new(vx, vy, vz), thr);
    for _ in 0..REFINE_ROUNDS {
        let Some(next_vz) = refit_vz(pts, &inliers, vx, vy) else {
            break;
        };
        vz = next_vz;
        let next = xz_consensus(pts, xy_inliers, &Vec3::new(vx, vy, vz), thr);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.is_empty() {
        return Err(EgoError::Degenerate("empty vertical consensus".into()));
    }
    Ok(XzFit { vz, inliers })
}

/// Least-squares 3D velocity minimising `sum (doppler_i + d_i . v)^2` over
/// `inliers`, with covariance `sigma^2 (A^T A)^-1`.
pub fn lsq_velocity(
    scan: &RadarScan,
    inliers: &[usize],
    doppler_sigma: f64,
) -> Result<EgoVelEstimate, EgoError> {
    if inliers.len() < 3 {
        return Err(EgoError::RankDeficient {
            cond: f64::INFINITY,
        });
    }
    let pts = &scan.points;
    let mut ata = Mat3::zeros();
    let mut atb = Vec3::zeros();
    for &i in inliers {
        let d = unit_dir(&pts[i].position);
        ata += d * d.transpose();
        atb -= d * pts[i].doppler;
    }
    let eig = SymmetricEigen::new(ata);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let cond = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    if cond > CONDITION_LIMIT {
        return Err(EgoError::RankDeficient { cond });
    }
    let chol = ata.cholesky().ok_or(EgoError::RankDeficient { cond })?;
    let mut v = chol.solve(&atb);
    // one round of iterative refinement on the normal equations
    let r = atb - ata * v;
    v += chol.solve(&r);
    let cov = chol.inverse() * (doppler_sigma * doppler_sigma);
    let mut mask = vec![false; pts.len()];
    for &i in inliers {
        mask[i] = true;
    }
    Ok(EgoVelEstimate {
        timestamp: scan.timestamp,
        v_hat: v,
        inlier_mask: mask,
        covariance: (cov + cov.transpose()) * 0.5,
        valid: true,
        diagnostics: EgoDiagnostics::default(),
    })
}

/// Full pipeline: horizontal RANSAC, vertical RANSAC, least squares. Failures
/// are reported through `valid = false` so the caller can skip the scan.
pub fn estimate_ego_velocity(scan: &RadarScan, params: &RansacParams) -> EgoVelEstimate {
    if scan.points.is_empty() {
        return EgoVelEstimate::invalid(scan, "empty scan");
    }
    let usable = scan
        .points
        .iter()
        .filter(|p| p.position.xy().norm() > 1e-9)
        .count();
    let xy = match ransac_xy(scan, params) {
        Ok(f) => f,
        Err(e) => {
            let mut est = EgoVelEstimate::invalid(scan, e.to_string());
            est.diagnostics.usable_points = usable;
            return est;
        }
    };

    let mut diag = EgoDiagnostics {
        usable_points: usable,
        xy_inliers: xy.inliers.len(),
        ..Default::default()
    };
    let final_inliers = if params.xz_stage {
        match ransac_xz(scan, &xy.inliers, xy.vx, xy.vy, params) {
            Ok(f) => f.inliers,
            Err(_) => {
                diag.xz_degenerate = true;
                xy.inliers.clone()
            }
        }
    } else {
        xy.inliers.clone()
    };
    diag.xz_inliers = final_inliers.len();

    match lsq_velocity(scan, &final_inliers, params.doppler_sigma) {
        Ok(mut est) => {
            if diag.xz_degenerate {
                est.covariance *= XZ_DEGENERATE_INFLATION;
            }
            est.diagnostics = diag;
            est
        }
        Err(e) => {
            let mut est = EgoVelEstimate::invalid(scan, e.to_string());
            diag.failure = Some(e.to_string());
            est.diagnostics = diag;
            est
        }
    }
}
