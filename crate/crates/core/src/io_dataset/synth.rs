//! Synthetic quadruped walks with radar, IMU, joint and contact streams.
//!
//! The body follows a path of lines and arcs at a smoothly ramped speed over
//! a terrain of stairs and ramps. Feet trot; each stance foot is a sphere that
//! rolls without slipping, integrated from the rolling constraint, so the
//! joint stream is exactly consistent with the leg velocity model. Radar
//! points come from a static landmark field; outliers, wrong elevations and
//! moving objects are injected on request.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ImuSample, Pose, SensorLog, Trajectory};
use crate::geom::{vee, ypr_compose, Mat3, Rot3, Vec3, YprAngles};
use crate::leg_kin::{
    fk_jacobians, fk_pos_jacobian, fk_rot, ik_position, ContactState, JointState, LegModel,
    NUM_LEGS,
};
use crate::radar_ego::{RadarPoint, RadarScan};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("leg {leg} cannot reach its foothold at t = {t:.3} s")]
    InfeasibleIk { leg: usize, t: f64 },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathSegment {
    Line {
        length: f64,
    },
    /// Positive angle turns left.
    Arc {
        radius: f64,
        angle_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TerrainFeature {
    /// Steps rising along `direction` from the line through `origin`; the
    /// first riser lies on that line. Extends without bound sideways.
    Stairs {
        origin: [f64; 2],
        direction: [f64; 2],
        steps: usize,
        riser: f64,
        tread: f64,
    },
    /// Smooth slope rising by `rise` over `length` along `direction`.
    Ramp {
        origin: [f64; 2],
        direction: [f64; 2],
        length: f64,
        rise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSegment {
    pub start: f64,
    pub end: f64,
    /// Share of the scan's points that belong to the moving object.
    pub fraction: f64,
    /// Object velocity in the world frame, m/s.
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarSim {
    pub rate: f64,
    pub doppler_sigma: f64,
    pub point_sigma: f64,
    /// Points replaced by clutter with uniform doppler in [-5, 5] m/s.
    pub clutter_fraction: f64,
    /// Points whose reported height is off by `elevation_offset`.
    pub elevation_fraction: f64,
    pub elevation_offset: f64,
    /// Share of elevation errors that push the point down, as floor
    /// multipath ghosts do. 0.5 gives symmetric errors.
    pub elevation_down_share: f64,
    pub landmarks: usize,
    /// Landmark box margin around the path, m.
    pub landmark_margin: f64,
    /// Landmark heights above the ground, m.
    pub landmark_height: [f64; 2],
    pub max_points: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
    pub dynamic: Vec<DynamicSegment>,
}

impl Default for RadarSim {
    fn default() -> Self {
        RadarSim {
            rate: 20.0,
            doppler_sigma: 0.0,
            point_sigma: 0.0,
            clutter_fraction: 0.0,
            elevation_fraction: 0.0,
            elevation_offset: 2.0,
            elevation_down_share: 0.5,
            landmarks: 1500,
            landmark_margin: 25.0,
            landmark_height: [-0.5, 3.5],
            max_points: 200,
            min_range: 0.5,
            max_range: 20.0,
            azimuth_fov_deg: 120.0,
            elevation_fov_deg: 60.0,
            dynamic: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuSim {
    pub rate: f64,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    /// Stationary std of the orientation error per axis (roll, pitch, yaw), rad.
    pub attitude_sigma: [f64; 3],
    /// Correlation time of the orientation error, s.
    pub attitude_tau: f64,
    pub with_orientation: bool,
}

impl Default for ImuSim {
    fn default() -> Self {
        ImuSim {
            rate: 100.0,
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            attitude_sigma: [0.0; 3],
            attitude_tau: 5.0,
            with_orientation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegSim {
    pub rate: f64,
    pub angle_sigma: f64,
    pub rate_sigma: f64,
    /// Stance feet slide along the body's horizontal velocity at this ratio,
    /// which scales the leg-odometry velocity by `1 - slip`.
    pub slip: f64,
    pub gait_period: usize,
    pub stance_samples: usize,
    pub swing_height: f64,
    pub substeps: usize,
}

impl Default for LegSim {
    fn default() -> Self {
        LegSim {
            rate: 180.0,
            angle_sigma: 0.0,
            rate_sigma: 0.0,
            slip: 0.0,
            gait_period: 108,
            stance_samples: 65,
            swing_height: 0.08,
            substeps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthScenario {
    pub duration: f64,
    pub seed: u64,
    /// Speed ramp at both ends, s.
    pub ramp_time: f64,
    /// Body origin above the smoothed ground, m.
    pub body_height: f64,
    /// Start position and heading `[x, y, yaw]`.
    pub start: [f64; 3],
    pub path: Vec<PathSegment>,
    pub terrain: Vec<TerrainFeature>,
    pub gt_rate: f64,
    pub radar: RadarSim,
    pub imu: ImuSim,
    pub legs: LegSim,
    pub leg_model: LegModel,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario {
            duration: 10.0,
            seed: 0,
            ramp_time: 1.0,
            body_height: 0.45,
            start: [0.0; 3],
            path: Vec::new(),
            terrain: Vec::new(),
            gt_rate: 100.0,
            radar: RadarSim::default(),
            imu: ImuSim::default(),
            legs: LegSim::default(),
            leg_model: LegModel::default(),
        }
    }
}

fn fraction_ok(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SynthScenario {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScenario(m.to_string()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.ramp_time >= 0.0) || 2.0 * self.ramp_time > self.duration {
            return bad("ramp_time must be non-negative and below half the duration");
        }
        let r = &self.radar;
        if !fraction_ok(r.clutter_fraction)
            || !fraction_ok(r.elevation_fraction)
            || !fraction_ok(r.elevation_down_share)
        {
            return bad("radar fractions must lie in [0, 1]");
        }
        if r.clutter_fraction + r.elevation_fraction > 1.0 {
            return bad("clutter and elevation fractions exceed 1");
        }
        if r.dynamic
            .iter()
            .any(|d| !fraction_ok(d.fraction) || d.end < d.start)
        {
            return bad("dynamic segments need start <= end and fraction in [0, 1]");
        }
        if !fraction_ok(self.legs.slip) {
            return bad("slip must lie in [0, 1]");
        }
        if self.legs.stance_samples == 0 || self.legs.stance_samples >= self.legs.gait_period {
            return bad("stance_samples must lie in (0, gait_period)");
        }
        if !(r.rate > 0.0 && self.imu.rate > 0.0 && self.legs.rate > 0.0 && self.gt_rate > 0.0) {
            return bad("rates must be positive");
        }
        for seg in &self.path {
            match seg {
                PathSegment::Line { length } if !(*length > 0.0) => return bad("line length"),
                PathSegment::Arc { radius, .. } if !(*radius > 0.0) => return bad("arc radius"),
                _ => {}
            }
        }
        self.leg_model
            .validate()
            .map_err(|e| SynthError::InvalidScenario(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SynthError> {
        let sc: SynthScenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn path_length(&self) -> f64 {
        self.path
            .iter()
            .map(|s| match s {
                PathSegment::Line { length } => *length,
                PathSegment::Arc { radius, angle_deg } => radius * angle_deg.to_radians().abs(),
            })
            .sum()
    }
}

/// Quintic smoothstep on [0, 1] and its derivative.
fn smoother(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        let v = x * x * x * (x * (6.0 * x - 15.0) + 10.0);
        let d = 30.0 * x * x * (x - 1.0) * (x - 1.0);
        (v, d)
    }
}

fn unit2(d: [f64; 2]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    (d[0] / n, d[1] / n)
}

impl TerrainFeature {
    fn along(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let (origin, direction) = match self {
            TerrainFeature::Stairs {
                origin, direction, ..
            }
            | TerrainFeature::Ramp {
                origin, direction, ..
            } => (origin, direction),
        };
        let d = unit2(*direction);
        ((x - origin[0]) * d.0 + (y - origin[1]) * d.1, d)
    }

    /// Height of the walking surface.
    fn surface(&self, x: f64, y: f64) -> f64 {
        let (u, _) = self.along(x, y);
        match self {
            TerrainFeature::Stairs {
                steps,
                riser,
                tread,
                ..
            } => {
                let n = if u < 0.0 {
                    0
                } else {
                    ((u / tread).floor() as usize + 1).min(*steps)
                };
                n as f64 * riser
            }
            TerrainFeature::Ramp { .. } => self.body_ground(x, y).0,
        }
    }

    /// Smoothed height followed by the body, with its gradient.
    fn body_ground(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let (u, d) = self.along(x, y);
        let (h, slope) = match self {
            TerrainFeature::Stairs {
                steps,
                riser,
                tread,
                ..
            } => {
                let blend = 2.0 * tread;
                let start = -0.5 * tread - 0.5 * blend;
                let end = (*steps as f64 - 0.5) * tread + 0.5 * blend;
                blended_ramp(u, start, end, blend, riser / tread)
            }
            TerrainFeature::Ramp { length, rise, .. } => {
                let blend = 0.25 * length;
                blended_ramp(u, 0.0, *length, blend, rise / (length - blend))
            }
        };
        (h, (slope * d.0, slope * d.1))
    }
}

/// Integral of [`smoother`] from 0 to `x`.
fn smoother_integral(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        0.5 + (x - 1.0)
    } else {
        x.powi(4) * (x * (x - 3.0) + 2.5)
    }
}

/// Height and slope of a linear rise of slope `m` between `start` and `end`
/// whose corners are rounded over `blend`. Total rise is `m (end - start - blend)`.
fn blended_ramp(u: f64, start: f64, end: f64, blend: f64, m: f64) -> (f64, f64) {
    let a = (u - start) / blend;
    let b = (u - end + blend) / blend;
    (
        m * blend * (smoother_integral(a) - smoother_integral(b)),
        m * (smoother(a).0 - smoother(b).0),
    )
}

#[derive(Debug, Clone, Copy)]
struct SegmentStart {
    s0: f64,
    x: f64,
    y: f64,
    yaw: f64,
}

/// Kinematic body trajectory: pose as a function of time.
#[derive(Debug, Clone)]
pub struct BodyMotion {
    segments: Vec<(PathSegment, SegmentStart)>,
    end: SegmentStart,
    terrain: Vec<TerrainFeature>,
    length: f64,
    duration: f64,
    ramp: f64,
    cruise: f64,
    body_height: f64,
}

/// Body state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub t: f64,
    pub p: Vec3,
    pub r: Rot3,
    /// World frame, m/s.
    pub v: Vec3,
    /// Body frame, rad/s.
    pub omega: Vec3,
}

const FD_STEP: f64 = 1e-5;

impl BodyMotion {
    pub fn new(sc: &SynthScenario) -> Self {
        let mut cur = SegmentStart {
            s0: 0.0,
            x: sc.start[0],
            y: sc.start[1],
            yaw: sc.start[2],
        };
        let mut segments = Vec::new();
        for seg in &sc.path {
            segments.push((seg.clone(), cur));
            let (len, x, y, yaw) = match seg {
                PathSegment::Line { length } => (
                    *length,
                    cur.x + length * cur.yaw.cos(),
                    cur.y + length * cur.yaw.sin(),
                    cur.yaw,
                ),
                PathSegment::Arc { radius, angle_deg } => {
                    let a = angle_deg.to_radians();
                    let (x, y, yaw) = arc_point(&cur, *radius, a, radius * a.abs());
                    (radius * a.abs(), x, y, yaw)
                }
            };
            cur = SegmentStart {
                s0: cur.s0 + len,
                x,
                y,
                yaw,
            };
        }
        let length = cur.s0;
        let cruise_time = sc.duration - sc.ramp_time;
        BodyMotion {
            segments,
            end: cur,
            terrain: sc.terrain.clone(),
            length,
            duration: sc.duration,
            ramp: sc.ramp_time,
            cruise: if length > 0.0 {
                length / cruise_time
            } else {
                0.0
            },
            body_height: sc.body_height,
        }
    }

    pub fn is_static(&self) -> bool {
        self.cruise == 0.0
    }

    /// Arc length travelled at time `t`; extrapolated at the end speeds
    /// outside `[0, duration]`.
    fn arc_length(&self, t: f64) -> f64 {
        let (v, tr, t_end) = (self.cruise, self.ramp, self.duration);
        if tr == 0.0 {
            return v * t;
        }
        let ramp_dist = |tau: f64| v * (tau / 2.0 - tr / (2.0 * PI) * (PI * tau / tr).sin());
        if t < 0.0 {
            0.0
        } else if t < tr {
            ramp_dist(t)
        } else if t <= t_end - tr {
            v * (tr / 2.0 + (t - tr))
        } else if t <= t_end {
            self.length - ramp_dist(t_end - t)
        } else {
            self.length
        }
    }

    fn planar(&self, s: f64) -> (f64, f64, f64) {
        if s < 0.0 || self.segments.is_empty() {
            let st = self.segments.first().map_or(self.end, |(_, st)| *st);
            return (st.x + s * st.yaw.cos(), st.y + s * st.yaw.sin(), st.yaw);
        }
        if s > self.length {
            let e = &self.end;
            let ds = s - self.length;
            return (e.x + ds * e.yaw.cos(), e.y + ds * e.yaw.sin(), e.yaw);
        }
        for (seg, st) in self.segments.iter().rev() {
            if s >= st.s0 {
                let ds = s - st.s0;
                return match seg {
                    PathSegment::Line { .. } => {
                        (st.x + ds * st.yaw.cos(), st.y + ds * st.yaw.sin(), st.yaw)
                    }
                    PathSegment::Arc { radius, angle_deg } => {
                        arc_point(st, *radius, angle_deg.to_radians(), ds)
                    }
                };
            }
        }
        (self.end.x, self.end.y, self.end.yaw)
    }

    /// Walking-surface height under a world point.
    pub fn surface(&self, x: f64, y: f64) -> f64 {
        self.terrain.iter().map(|f| f.surface(x, y)).sum()
    }

    fn body_ground(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let mut h = 0.0;
        let mut g = (0.0, 0.0);
        for f in &self.terrain {
            let (hf, gf) = f.body_ground(x, y);
            h += hf;
            g.0 += gf.0;
            g.1 += gf.1;
        }
        (h, g)
    }

    pub fn pose(&self, t: f64) -> (Vec3, Rot3) {
        let (x, y, yaw) = self.planar(self.arc_length(t));
        let (h, g) = self.body_ground(x, y);
        let slope_fwd = g.0 * yaw.cos() + g.1 * yaw.sin();
        let slope_left = -g.0 * yaw.sin() + g.1 * yaw.cos();
        let pitch = -slope_fwd.atan();
        let roll = slope_left.atan();
        (
            Vec3::new(x, y, h + self.body_height),
            ypr_compose(&YprAngles::new(roll, pitch, yaw)),
        )
    }

    pub fn state(&self, t: f64) -> BodyState {
        let (p, r) = self.pose(t);
        let (pp, rp) = self.pose(t + FD_STEP);
        let (pm, rm) = self.pose(t - FD_STEP);
        let v = (pp - pm) / (2.0 * FD_STEP);
        let rdot = (rp.matrix() - rm.matrix()) / (2.0 * FD_STEP);
        let omega = vee(&(r.matrix().transpose() * rdot));
        BodyState { t, p, r, v, omega }
    }

    /// World acceleration by second differences.
    pub fn acceleration(&self, t: f64) -> Vec3 {
        let h = 1e-4;
        (self.pose(t + h).0 - 2.0 * self.pose(t).0 + self.pose(t - h).0) / (h * h)
    }
}

fn arc_point(st: &SegmentStart, radius: f64, angle: f64, ds: f64) -> (f64, f64, f64) {
    let sign = angle.signum();
    let turned = sign * ds / radius;
    let cx = st.x - sign * radius * st.yaw.sin();
    let cy = st.y + sign * radius * st.yaw.cos();
    let yaw = st.yaw + turned;
    (
        cx + sign * radius * yaw.sin(),
        cy - sign * radius * yaw.cos(),
        yaw,
    )
}

/// Ground-truth quantities that do not appear in the log.
#[derive(Debug, Clone, Default)]
pub struct SynthTruth {
    /// Body state at every joint sample.
    pub body: Vec<BodyState>,
    /// Contact-frame angular velocity (contact frame) per stance foot at every
    /// joint sample.
    pub contact_omega: Vec<[Option<Vec3>; NUM_LEGS]>,
    /// Exact joint angles and rates before noise.
    pub joints: Vec<JointState>,
    /// Labels of each radar point, per scan.
    pub radar_labels: Vec<Vec<PointLabel>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Static,
    Clutter,
    Elevation,
    Dynamic,
}

pub struct SynthOutput {
    pub log: SensorLog,
    pub truth: SynthTruth,
}

/// Nominal foot-centre touchdown point below a hip.
fn nominal_foothold(
    motion: &BodyMotion,
    model: &LegModel,
    leg: usize,
    t: f64,
    stance_time: f64,
) -> Vec3 {
    let b = motion.state(t);
    let side = model.legs[leg].side;
    let under_hip = model.hip(leg) + Vec3::new(0.0, side * model.link_lengths[0], 0.0);
    let mut c = b.p + b.r * under_hip + b.v * (0.5 * stance_time);
    c.z = motion.surface(c.x, c.y) + model.foot_radius;
    c
}

#[derive(Debug, Clone, Copy)]
enum FootPhase {
    Stance,
    Swing {
        start: Vec3,
        target: Vec3,
        t0: f64,
        t1: f64,
        lift: f64,
    },
}

struct FootSim {
    c: Vec3,
    q: [f64; 3],
    phase: FootPhase,
}

impl FootPhase {
    /// Swing foot-centre position and velocity.
    fn swing_point(&self, t: f64) -> (Vec3, Vec3) {
        let FootPhase::Swing {
            start,
            target,
            t0,
            t1,
            lift,
        } = *self
        else {
            unreachable!("swing_point on stance foot")
        };
        let dur = t1 - t0;
        let tau = ((t - t0) / dur).clamp(0.0, 1.0);
        let (s, ds) = smoother(tau);
        let bump = (PI * tau).sin();
        let dbump = PI * (PI * tau).cos();
        let mut p = start + (target - start) * s;
        p.z += lift * bump;
        let mut v = (target - start) * (ds / dur);
        v.z += lift * dbump / dur;
        (p, v)
    }
}

struct RollingContext<'a> {
    motion: &'a BodyMotion,
    model: &'a LegModel,
    slip: f64,
}

impl RollingContext<'_> {
    /// Foot-centre velocity of a stance foot and the matching joint solution.
    fn derivative(
        &self,
        leg: usize,
        t: f64,
        c: &Vec3,
        seed: &[f64; 3],
    ) -> Option<(Vec3, [f64; 3], [f64; 3], Vec3)> {
        let b = self.motion.state(t);
        let rt = b.r.transpose();
        let rel = rt * (c - b.p);
        let q = ik_position(leg, &rel, seed, self.model).ok()?;
        let j = fk_pos_jacobian(leg, &q, self.model);
        let j_inv = j.try_inverse()?;
        let g = angular_jacobian(leg, &q, self.model);
        let m = g * j_inv;
        let r = *b.r.matrix();
        let n = Vec3::z() * self.model.foot_radius;
        let nx = crate::geom::skew(&n);
        // c_dot = -[n]x w_world + slip * v_horizontal, with
        // w_world = R (w_b + M (R^T (c_dot - v) - w_b x rel))
        let a = Mat3::identity() + nx * r * m * r.transpose();
        let mut slip_v = b.v * self.slip;
        slip_v.z = 0.0;
        let rhs = -nx * (r * (b.omega + m * (-(rt * b.v) - b.omega.cross(&rel)))) + slip_v;
        let c_dot = a.try_inverse()? * rhs;
        let rel_dot = rt * (c_dot - b.v) - b.omega.cross(&rel);
        let qd_v = j_inv * rel_dot;
        let w_world = r * (b.omega + g * qd_v);
        Some((c_dot, q, [qd_v.x, qd_v.y, qd_v.z], w_world))
    }
}

/// Body-frame angular velocity of the contact frame per unit joint rate.
fn angular_jacobian(leg: usize, q: &[f64; 3], model: &LegModel) -> Mat3 {
    let r_bc = *fk_rot(leg, q, model).matrix();
    let col = |k: usize| {
        let mut qd = [0.0; 3];
        qd[k] = 1.0;
        r_bc * fk_jacobians(leg, q, &qd, model).0
    };
    Mat3::from_columns(&[col(0), col(1), col(2)])
}

/// Generates a log and its ground truth. Deterministic for a given scenario.
pub fn synth_generate(sc: &SynthScenario) -> Result<SynthOutput, SynthError> {
    sc.validate()?;
    let motion = BodyMotion::new(sc);
    let model = &sc.leg_model;
    let mut log = SensorLog::default();
    let mut truth = SynthTruth::default();

    generate_legs(sc, &motion, &mut log, &mut truth)?;
    generate_radar(sc, &motion, &mut log, &mut truth);
    generate_imu(sc, &motion, &mut log);

    let n_gt = (sc.duration * sc.gt_rate).floor() as usize;
    let poses = (0..=n_gt)
        .map(|k| {
            let t = k as f64 / sc.gt_rate;
            let (p, r) = motion.pose(t);
            Pose { timestamp: t, p, r }
        })
        .collect();
    log.ground_truth = Some(Trajectory { poses });

    let meta = &mut log.meta;
    meta.insert("source".into(), "synthetic".into());
    meta.insert("seed".into(), sc.seed.to_string());
    meta.insert("radar_rate".into(), sc.radar.rate.to_string());
    meta.insert("imu_rate".into(), sc.imu.rate.to_string());
    meta.insert("joint_rate".into(), sc.legs.rate.to_string());
    meta.insert("foot_radius".into(), model.foot_radius.to_string());
    meta.insert("path_length".into(), motion.length.to_string());
    Ok(SynthOutput { log, truth })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream)
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn generate_legs(
    sc: &SynthScenario,
    motion: &BodyMotion,
    log: &mut SensorLog,
    truth: &mut SynthTruth,
) -> Result<(), SynthError> {
    let model = &sc.leg_model;
    let ls = &sc.legs;
    let rate = ls.rate;
    let period = ls.gait_period;
    let stance = ls.stance_samples;
    let stance_time = stance as f64 / rate;
    let swing_time = (period - stance) as f64 / rate;
    let offsets = [0, period / 2, period / 2, 0];
    let walking = !motion.is_static();
    let in_stance = |leg: usize, k: usize| !walking || (k + offsets[leg]) % period < stance;

    let n = (sc.duration * rate).floor() as usize;
    let ctx = RollingContext {
        motion,
        model,
        slip: ls.slip,
    };
    let mut rng = stream_rng(sc.seed, 1);
    let nominal_q = [0.0, 0.8, -1.6];

    let mut feet: Vec<FootSim> = (0..NUM_LEGS)
        .map(|leg| {
            let c = nominal_foothold(motion, model, leg, 0.0, 0.0);
            let phase = if in_stance(leg, 0) {
                FootPhase::Stance
            } else {
                let into = ((offsets[leg]) % period - stance) as f64 / rate;
                FootPhase::Swing {
                    start: c,
                    target: nominal_foothold(motion, model, leg, swing_time - into, stance_time),
                    t0: -into,
                    t1: swing_time - into,
                    lift: ls.swing_height,
                }
            };
            FootSim {
                c,
                q: nominal_q,
                phase,
            }
        })
        .collect();

    for k in 0..=n {
        let t = k as f64 / rate;
        // phase transitions happen on sample boundaries
        for (leg, foot) in feet.iter_mut().enumerate() {
            let st = in_stance(leg, k);
            match (&foot.phase, st) {
                (FootPhase::Swing { target, .. }, true) => {
                    foot.c = *target;
                    foot.phase = FootPhase::Stance;
                }
                (FootPhase::Stance, false) => {
                    let t1 = t + swing_time;
                    let target = nominal_foothold(motion, model, leg, t1, stance_time);
                    foot.phase = FootPhase::Swing {
                        start: foot.c,
                        target,
                        t0: t,
                        t1,
                        lift: ls.swing_height,
                    };
                }
                _ => {}
            }
        }

        let body = motion.state(t);
        let mut js = JointState {
            timestamp: t,
            angles: [0.0; 3 * NUM_LEGS],
            velocities: [0.0; 3 * NUM_LEGS],
        };
        let mut omegas = [None; NUM_LEGS];
        let mut contacts = ContactState {
            timestamp: t,
            in_contact: [false; NUM_LEGS],
        };
        for (leg, foot) in feet.iter_mut().enumerate() {
            let (q, qd) = match foot.phase {
                FootPhase::Stance => {
                    let (_, q, qd, w_world) = ctx
                        .derivative(leg, t, &foot.c, &foot.q)
                        .ok_or(SynthError::InfeasibleIk { leg, t })?;
                    let r_wc = body.r * fk_rot(leg, &q, model);
                    omegas[leg] = Some(r_wc.transpose() * w_world);
                    contacts.in_contact[leg] = true;
                    (q, qd)
                }
                FootPhase::Swing { .. } => {
                    let (c, c_dot) = foot.phase.swing_point(t);
                    foot.c = c;
                    let rt = body.r.transpose();
                    let rel = rt * (c - body.p);
                    let q = ik_position(leg, &rel, &foot.q, model)
                        .map_err(|_| SynthError::InfeasibleIk { leg, t })?;
                    let rel_dot = rt * (c_dot - body.v) - body.omega.cross(&rel);
                    let j_inv = fk_pos_jacobian(leg, &q, model)
                        .try_inverse()
                        .ok_or(SynthError::InfeasibleIk { leg, t })?;
                    let qd = j_inv * rel_dot;
                    (q, [qd.x, qd.y, qd.z])
                }
            };
            foot.q = q;
            for j in 0..3 {
                js.angles[3 * leg + j] = q[j];
                js.velocities[3 * leg + j] = qd[j];
            }
        }
        truth.body.push(body);
        truth.contact_omega.push(omegas);
        truth.joints.push(js);

        let mut noisy = js;
        for j in 0..3 * NUM_LEGS {
            noisy.angles[j] += gauss(&mut rng, ls.angle_sigma);
            noisy.velocities[j] += gauss(&mut rng, ls.rate_sigma);
        }
        log.joints.push(noisy);
        log.contacts.push(contacts);

        // integrate stance feet to the next sample
        if k < n {
            let h = 1.0 / (rate * ls.substeps as f64);
            for (leg, foot) in feet.iter_mut().enumerate() {
                if !matches!(foot.phase, FootPhase::Stance) || !in_stance(leg, k + 1) {
                    continue;
                }
                for sub in 0..ls.substeps {
                    let ts = t + sub as f64 * h;
                    let f = |tt: f64, c: &Vec3| {
                        ctx.derivative(leg, tt, c, &foot.q)
                            .map(|d| d.0)
                            .ok_or(SynthError::InfeasibleIk { leg, t: tt })
                    };
                    let k1 = f(ts, &foot.c)?;
                    let k2 = f(ts + h / 2.0, &(foot.c + k1 * (h / 2.0)))?;
                    let k3 = f(ts + h / 2.0, &(foot.c + k2 * (h / 2.0)))?;
                    let k4 = f(ts + h, &(foot.c + k3 * h))?;
                    foot.c += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                }
            }
        }
    }
    Ok(())
}

fn landmark_field(sc: &SynthScenario, motion: &BodyMotion) -> Vec<Vec3> {
    let mut rng = stream_rng(sc.seed, 2);
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let steps = 200;
    for i in 0..=steps {
        let (x, y, _) = motion.planar(motion.length * i as f64 / steps as f64);
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let m = sc.radar.landmark_margin;
    let [h0, h1] = sc.radar.landmark_height;
    (0..sc.radar.landmarks)
        .map(|_| {
            let x = rng.random_range(lo.0 - m..hi.0 + m);
            let y = rng.random_range(lo.1 - m..hi.1 + m);
            let z = motion.surface(x, y) + rng.random_range(h0..h1);
            Vec3::new(x, y, z)
        })
        .collect()
}

fn generate_radar(
    sc: &SynthScenario,
    motion: &BodyMotion,
    log: &mut SensorLog,
    truth: &mut SynthTruth,
) {
    let rs = &sc.radar;
    let landmarks = landmark_field(sc, motion);
    let mut rng = stream_rng(sc.seed, 3);
    let n = (sc.duration * rs.rate).floor() as usize;
    let half_az = rs.azimuth_fov_deg.to_radians() / 2.0;
    let half_el = rs.elevation_fov_deg.to_radians() / 2.0;
    for k in 0..=n {
        let t = k as f64 / rs.rate;
        let b = motion.state(t);
        let rt = b.r.transpose();
        let v_s = rt * b.v;
        let mut visible: Vec<Vec3> = landmarks
            .iter()
            .map(|l| rt * (l - b.p))
            .filter(|p| {
                let r = p.norm();
                r >= rs.min_range
                    && r <= rs.max_range
                    && p.y.atan2(p.x).abs() <= half_az
                    && (p.z / r).asin().abs() <= half_el
            })
            .collect();
        visible.shuffle(&mut rng);
        visible.truncate(rs.max_points);
        let dynamic = rs.dynamic.iter().find(|d| t >= d.start && t <= d.end);
        let mut points = Vec::with_capacity(visible.len());
        let mut labels = Vec::with_capacity(visible.len());
        for p in visible {
            let d = p / p.norm();
            let u: f64 = rng.random_range(0.0..1.0);
            let (label, doppler, pos) = match dynamic {
                Some(dy) if u < dy.fraction => {
                    let v_obj = rt * Vec3::from(dy.velocity);
                    (PointLabel::Dynamic, -d.dot(&(v_s - v_obj)), p)
                }
                _ => {
                    let u2: f64 = rng.random_range(0.0..1.0);
                    if u2 < rs.clutter_fraction {
                        (PointLabel::Clutter, rng.random_range(-5.0..5.0), p)
                    } else if u2 < rs.clutter_fraction + rs.elevation_fraction {
                        let sign = if rng.random_bool(rs.elevation_down_share) {
                            -1.0
                        } else {
                            1.0
                        };
                        let shifted = p + Vec3::z() * (sign * rs.elevation_offset);
                        (PointLabel::Elevation, -d.dot(&v_s), shifted)
                    } else {
                        (PointLabel::Static, -d.dot(&v_s), p)
                    }
                }
            };
            let noise = Vec3::new(
                gauss(&mut rng, rs.point_sigma),
                gauss(&mut rng, rs.point_sigma),
                gauss(&mut rng, rs.point_sigma),
            );
            points.push(RadarPoint {
                position: pos + noise,
                doppler: doppler + gauss(&mut rng, rs.doppler_sigma),
                intensity: rng.random_range(5.0..30.0),
            });
            labels.push(label);
        }
        log.radar.push(RadarScan {
            timestamp: t,
            points,
        });
        truth.radar_labels.push(labels);
    }
}

fn generate_imu(sc: &SynthScenario, motion: &BodyMotion, log: &mut SensorLog) {
    let is = &sc.imu;
    let mut rng = stream_rng(sc.seed, 4);
    let n = (sc.duration * is.rate).floor() as usize;
    let dt = 1.0 / is.rate;
    let phi = (-dt / is.attitude_tau).exp();
    let mut err = Vec3::new(
        gauss(&mut rng, is.attitude_sigma[0]),
        gauss(&mut rng, is.attitude_sigma[1]),
        gauss(&mut rng, is.attitude_sigma[2]),
    );
    let drive = (1.0 - phi * phi).sqrt();
    for k in 0..=n {
        let t = k as f64 * dt;
        let b = motion.state(t);
        let a = motion.acceleration(t);
        let f = b.r.transpose() * (a + Vec3::z() * GRAVITY);
        let noise =
            |rng: &mut ChaCha8Rng, s: f64| Vec3::new(gauss(rng, s), gauss(rng, s), gauss(rng, s));
        let gyro = b.omega + noise(&mut rng, is.gyro_sigma);
        let acc = f + noise(&mut rng, is.accel_sigma);
        let orientation = is.with_orientation.then(|| {
            let e = ypr_compose(&YprAngles::new(err.x, err.y, err.z));
            e * b.r
        });
        log.imu.push(ImuSample {
            timestamp: t,
            angular_velocity: gyro,
            linear_acceleration: acc,
            orientation,
        });
        for ax in 0..3 {
            err[ax] = phi * err[ax] + drive * gauss(&mut rng, is.attitude_sigma[ax]);
        }
    }
}

/// Parameters of a single synthetic scan for ego-velocity tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSpec {
    pub velocity: Vec3,
    pub static_points: usize,
    /// Outliers as a share of all points.
    pub outlier_fraction: f64,
    /// Share of outliers that are elevation-corrupted; the rest is clutter.
    pub elevation_share: f64,
    pub elevation_offset: f64,
    pub doppler_sigma: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            velocity: Vec3::new(1.0, 0.0, 0.0),
            static_points: 150,
            outlier_fraction: 0.3,
            elevation_share: 0.5,
            elevation_offset: 2.0,
            doppler_sigma: 0.0,
            min_range: 0.5,
            max_range: 20.0,
            azimuth_fov_deg: 120.0,
            elevation_fov_deg: 60.0,
        }
    }
}

/// One scan of static points in the field of view plus labelled outliers.
pub fn synth_scan(
    spec: &ScanSpec,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> (RadarScan, Vec<PointLabel>) {
    let n_out = (spec.static_points as f64 * spec.outlier_fraction / (1.0 - spec.outlier_fraction))
        .round() as usize;
    let n_elev = (n_out as f64 * spec.elevation_share).round() as usize;
    let half_az = spec.azimuth_fov_deg.to_radians() / 2.0;
    let half_el = spec.elevation_fov_deg.to_radians() / 2.0;
    let mut items = Vec::new();
    for i in 0..spec.static_points + n_out {
        let r = rng.random_range(spec.min_range..spec.max_range);
        let az = rng.random_range(-half_az..half_az);
        let el = rng.random_range(-half_el..half_el);
        let p = Vec3::new(
            r * el.cos() * az.cos(),
            r * el.cos() * az.sin(),
            r * el.sin(),
        );
        let d = p / r;
        let noise = gauss(rng, spec.doppler_sigma);
        let item = if i < spec.static_points {
            (p, -d.dot(&spec.velocity) + noise, PointLabel::Static)
        } else if i < spec.static_points + n_elev {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                p + Vec3::z() * (sign * spec.elevation_offset),
                -d.dot(&spec.velocity) + noise,
                PointLabel::Elevation,
            )
        } else {
            (p, rng.random_range(-5.0..5.0), PointLabel::Clutter)
        };
        items.push(item);
    }
    items.shuffle(rng);
    let labels = items.iter().map(|i| i.2).collect();
    let points = items
        .into_iter()
        .map(|(p, d, _)| RadarPoint {
            position: p,
            doppler: d,
            intensity: -1.0,
        })
        .collect();
    (RadarScan { timestamp, points }, labels)
}

/// Ready-made scenarios used by the tests and shipped as examples.
pub mod presets {
    use super::*;

    /// Sensor noise of a typical chip radar, joint encoders and an
    /// orientation-filtering IMU: 0.1 m/s Doppler noise, 10% clutter and 10%
    /// wrong elevations.
    pub fn with_realistic_noise(mut sc: SynthScenario) -> SynthScenario {
        sc.radar.doppler_sigma = 0.1;
        sc.radar.point_sigma = 0.02;
        sc.radar.clutter_fraction = 0.1;
        sc.radar.elevation_fraction = 0.1;
        sc.legs.angle_sigma = 0.002;
        sc.legs.rate_sigma = 0.1;
        sc.imu.gyro_sigma = 0.002;
        sc.imu.accel_sigma = 0.02;
        sc.imu.attitude_sigma = [0.005; 3];
        sc.imu.attitude_tau = 20.0;
        sc
    }

    /// Straight walk on flat ground at a cruise speed reached after a ramp.
    pub fn straight_line(length: f64, duration: f64) -> SynthScenario {
        SynthScenario {
            duration,
            path: vec![PathSegment::Line { length }],
            ..Default::default()
        }
    }

    /// Robot standing still.
    pub fn standing(duration: f64) -> SynthScenario {
        SynthScenario {
            duration,
            ..Default::default()
        }
    }

    /// Stadium-shaped loop crossing one stair flight on each long side, so the
    /// flight is climbed once and descended once.
    pub fn stair_loop() -> SynthScenario {
        SynthScenario {
            duration: 60.0,
            seed: 7,
            start: [0.0, 0.0, 0.0],
            path: vec![
                PathSegment::Line { length: 16.0 },
                PathSegment::Arc {
                    radius: 4.0,
                    angle_deg: 180.0,
                },
                PathSegment::Line { length: 16.0 },
                PathSegment::Arc {
                    radius: 4.0,
                    angle_deg: 180.0,
                },
            ],
            terrain: vec![TerrainFeature::Stairs {
                origin: [6.0, 0.0],
                direction: [1.0, 0.0],
                steps: 5,
                riser: 0.15,
                tread: 0.3,
            }],
            ..Default::default()
        }
    }

    /// Walk with continuous turning on flat ground.
    pub fn curved_walk() -> SynthScenario {
        SynthScenario {
            duration: 40.0,
            seed: 11,
            path: vec![
                PathSegment::Line { length: 4.0 },
                PathSegment::Arc {
                    radius: 3.0,
                    angle_deg: 120.0,
                },
                PathSegment::Arc {
                    radius: 4.0,
                    angle_deg: -150.0,
                },
                PathSegment::Line { length: 4.0 },
                PathSegment::Arc {
                    radius: 3.0,
                    angle_deg: 90.0,
                },
            ],
            ..Default::default()
        }
    }

    /// Straight flight of stairs out and back along a corridor.
    pub fn stair_climb() -> SynthScenario {
        SynthScenario {
            duration: 40.0,
            seed: 5,
            path: vec![
                PathSegment::Line { length: 12.0 },
                PathSegment::Arc {
                    radius: 2.5,
                    angle_deg: 180.0,
                },
                PathSegment::Line { length: 12.0 },
            ],
            terrain: vec![TerrainFeature::Stairs {
                origin: [4.0, 0.0],
                direction: [1.0, 0.0],
                steps: 6,
                riser: 0.15,
                tread: 0.3,
            }],
            ..Default::default()
        }
    }
}
