//! Leg forward kinematics and body velocity from a rolling spherical foot.
//!
//! Each leg is a chain of three revolute joints (abduction, hip, knee) ending
//! in the centre of a spherical foot. The contact frame is rigidly attached to
//! the last link, so it rotates with the shank and rolls over the ground.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, so3_exp, so3_log, Mat3, Rot3, Vec3};

pub const NUM_LEGS: usize = 4;
pub const LEG_NAMES: [&str; NUM_LEGS] = ["FL", "FR", "RL", "RR"];
/// Smallest sample spacing accepted for differentiating contact orientation.
pub const MIN_DT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LegError {
    #[error("foot {0} is not in contact")]
    NoContact(usize),
    #[error("no foot in contact")]
    NoFootInContact,
    #[error("time step {0} s below {MIN_DT} s")]
    DtTooSmall(f64),
    #[error("invalid leg model: {0}")]
    InvalidModel(String),
    #[error("inverse kinematics did not converge (residual {0:.3e} m)")]
    IkFailed(f64),
    #[error("reading leg model: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing leg model: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegConfig {
    pub name: String,
    /// Body frame, m.
    pub hip_offset: [f64; 3],
    /// Joint axes in their parent frames.
    pub axes: [[f64; 3]; 3],
    /// +1 for left legs, -1 for right legs; orients the abduction link.
    pub side: f64,
    pub joint_min: [f64; 3],
    pub joint_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegModel {
    /// Abduction offset, thigh, shank; m.
    pub link_lengths: [f64; 3],
    /// m; zero gives the point-foot model.
    pub foot_radius: f64,
    pub legs: Vec<LegConfig>,
}

impl Default for LegModel {
    fn default() -> Self {
        let leg = |name: &str, x: f64, side: f64| LegConfig {
            name: name.to_string(),
            hip_offset: [x, 0.11 * side, 0.0],
            axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            side,
            joint_min: [-0.8, -1.5, -2.8],
            joint_max: [0.8, 2.3, -0.25],
        };
        LegModel {
            link_lengths: [0.11, 0.35, 0.34],
            foot_radius: 0.03,
            legs: vec![
                leg("FL", 0.29, 1.0),
                leg("FR", 0.29, -1.0),
                leg("RL", -0.29, 1.0),
                leg("RR", -0.29, -1.0),
            ],
        }
    }
}

impl LegModel {
    pub fn validate(&self) -> Result<(), LegError> {
        if self.legs.len() != NUM_LEGS {
            return Err(LegError::InvalidModel(format!(
                "expected {NUM_LEGS} legs, got {}",
                self.legs.len()
            )));
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(LegError::InvalidModel(
                "link lengths must be positive".into(),
            ));
        }
        if !(self.foot_radius >= 0.0) {
            return Err(LegError::InvalidModel(
                "foot_radius must be non-negative".into(),
            ));
        }
        for leg in &self.legs {
            for a in &leg.axes {
                let n = Vec3::from(*a).norm();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(LegError::InvalidModel(format!(
                        "leg {}: joint axis norm {n}",
                        leg.name
                    )));
                }
            }
            if leg.side.abs() != 1.0 {
                return Err(LegError::InvalidModel(format!(
                    "leg {}: side must be +-1",
                    leg.name
                )));
            }
            if (0..3).any(|k| leg.joint_min[k] > leg.joint_max[k]) {
                return Err(LegError::InvalidModel(format!(
                    "leg {}: joint limits",
                    leg.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, LegError> {
        let m: LegModel = toml::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, LegError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("leg model serializes")
    }

    fn axis(&self, leg: usize, k: usize) -> Vec3 {
        Vec3::from(self.legs[leg].axes[k])
    }

    /// Link vectors in the frame of the joint that drives them.
    fn links(&self, leg: usize) -> [Vec3; 3] {
        let l = self.link_lengths;
        [
            Vec3::new(0.0, self.legs[leg].side * l[0], 0.0),
            Vec3::new(0.0, 0.0, -l[1]),
            Vec3::new(0.0, 0.0, -l[2]),
        ]
    }

    pub fn hip(&self, leg: usize) -> Vec3 {
        Vec3::from(self.legs[leg].hip_offset)
    }

    pub fn total_reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn within_limits(&self, leg: usize, q: &[f64; 3]) -> bool {
        let c = &self.legs[leg];
        (0..3).all(|k| q[k] >= c.joint_min[k] && q[k] <= c.joint_max[k])
    }

    /// Per-leg cumulative rotations `[R0, R0 R1, R0 R1 R2]`.
    fn chain(&self, leg: usize, q: &[f64; 3]) -> [Rot3; 3] {
        let r0 = so3_exp(&(self.axis(leg, 0) * q[0]));
        let r01 = r0 * so3_exp(&(self.axis(leg, 1) * q[1]));
        let r012 = r01 * so3_exp(&(self.axis(leg, 2) * q[2]));
        [r0, r01, r012]
    }
}

/// Joint angles and rates of all legs, leg-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub timestamp: f64,
    pub angles: [f64; 3 * NUM_LEGS],
    pub velocities: [f64; 3 * NUM_LEGS],
}

impl JointState {
    pub fn leg_angles(&self, leg: usize) -> [f64; 3] {
        [
            self.angles[3 * leg],
            self.angles[3 * leg + 1],
            self.angles[3 * leg + 2],
        ]
    }

    pub fn leg_rates(&self, leg: usize) -> [f64; 3] {
        [
            self.velocities[3 * leg],
            self.velocities[3 * leg + 1],
            self.velocities[3 * leg + 2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactState {
    pub timestamp: f64,
    pub in_contact: [bool; NUM_LEGS],
}

/// Orientation of the contact frame in the body frame.
pub fn fk_rot(leg: usize, q: &[f64; 3], model: &LegModel) -> Rot3 {
    model.chain(leg, q)[2]
}

/// Foot-sphere centre in the body frame.
pub fn fk_pos(leg: usize, q: &[f64; 3], model: &LegModel) -> Vec3 {
    let [r0, r01, r012] = model.chain(leg, q);
    let [l0, l1, l2] = model.links(leg);
    model.hip(leg) + r0 * l0 + r01 * l1 + r012 * l2
}

/// Positional Jacobian `d fk_pos / d q` (columns per joint).
pub fn fk_pos_jacobian(leg: usize, q: &[f64; 3], model: &LegModel) -> Mat3 {
    let [r0, r01, r012] = model.chain(leg, q);
    let [l0, l1, l2] = model.links(leg);
    let hip = model.hip(leg);
    let o1 = hip + r0 * l0;
    let o2 = o1 + r01 * l1;
    let foot = o2 + r012 * l2;
    let z0 = model.axis(leg, 0);
    let z1 = r0 * model.axis(leg, 1);
    let z2 = r01 * model.axis(leg, 2);
    Mat3::from_columns(&[
        z0.cross(&(foot - hip)),
        z1.cross(&(foot - o1)),
        z2.cross(&(foot - o2)),
    ])
}

/// Angular velocity of the contact frame relative to the body, expressed in
/// the contact frame, and linear velocity of the foot centre in the body frame.
pub fn fk_jacobians(leg: usize, q: &[f64; 3], qd: &[f64; 3], model: &LegModel) -> (Vec3, Vec3) {
    let [r0, r01, r012] = model.chain(leg, q);
    let w_body = model.axis(leg, 0) * qd[0]
        + r0 * model.axis(leg, 1) * qd[1]
        + r01 * model.axis(leg, 2) * qd[2];
    let omega_bc = r012.transpose() * w_body;
    let v_bc = fk_pos_jacobian(leg, q, model) * Vec3::from(*qd);
    (omega_bc, v_bc)
}

/// Contact-frame angular velocity (contact frame) between two consecutive
/// world-frame contact orientations.
pub fn contact_angular_velocity(prev: &Rot3, cur: &Rot3, dt: f64) -> Result<Vec3, LegError> {
    if !(dt >= MIN_DT) {
        return Err(LegError::DtTooSmall(dt));
    }
    Ok(so3_log(&(prev.transpose() * *cur)) / dt)
}

/// Body angular velocity (body frame) and body linear velocity (world frame)
/// implied by one foot rolling without slip.
///
/// `omega_wc` is the contact-frame angular velocity in the contact frame;
/// `up_world` is the ground normal.
pub fn body_velocity_rolling(
    r_wb: &Rot3,
    leg: usize,
    q: &[f64; 3],
    qd: &[f64; 3],
    omega_wc: &Vec3,
    model: &LegModel,
    up_world: &Vec3,
) -> (Vec3, Vec3) {
    let r_bc = fk_rot(leg, q, model);
    let p_c = fk_pos(leg, q, model);
    let (omega_bc, v_bc) = fk_jacobians(leg, q, qd, model);
    let omega_wb = r_bc * (omega_wc - omega_bc);
    let n_c = up_world.normalize() * model.foot_radius;
    let omega_wc_world = (*r_wb * r_bc) * *omega_wc;
    // the foot centre moves like a sphere rolling on the plane through the contact point
    let foot_velocity = omega_wc_world.cross(&n_c);
    let v_wb = -(r_wb * &omega_wb.cross(&p_c)) - r_wb * &v_bc + foot_velocity;
    (omega_wb, v_wb)
}

/// As [`body_velocity_rolling`], refusing feet that are not in contact.
pub fn body_velocity_for_foot(
    r_wb: &Rot3,
    leg: usize,
    joints: &JointState,
    contacts: &ContactState,
    omega_wc: &Vec3,
    model: &LegModel,
    up_world: &Vec3,
) -> Result<(Vec3, Vec3), LegError> {
    if !contacts.in_contact[leg] {
        return Err(LegError::NoContact(leg));
    }
    Ok(body_velocity_rolling(
        r_wb,
        leg,
        &joints.leg_angles(leg),
        &joints.leg_rates(leg),
        omega_wc,
        model,
        up_world,
    ))
}

/// Inverse-variance mean of per-foot velocities. The returned covariance adds
/// the per-axis spread between feet to the fused covariance.
pub fn fuse_leg_velocity(feet: &[(Vec3, Mat3)]) -> Result<(Vec3, Mat3), LegError> {
    if feet.is_empty() {
        return Err(LegError::NoFootInContact);
    }
    if let [single] = feet {
        return Ok(*single);
    }
    let mut info = Mat3::zeros();
    let mut info_v = Vec3::zeros();
    for (v, cov) in feet {
        let w = cov
            .try_inverse()
            .ok_or_else(|| LegError::InvalidModel("singular per-foot covariance".into()))?;
        info += w;
        info_v += w * v;
    }
    let cov = info
        .try_inverse()
        .ok_or_else(|| LegError::InvalidModel("singular fused information".into()))?;
    let mean = cov * info_v;
    let n = feet.len() as f64;
    let mut spread = Vec3::zeros();
    for (v, _) in feet {
        spread += (v - mean).component_mul(&(v - mean));
    }
    Ok((mean, cov + Mat3::from_diagonal(&(spread / n))))
}

/// Numeric inverse kinematics for the foot centre, Newton steps from `seed`.
pub fn ik_position(
    leg: usize,
    target: &Vec3,
    seed: &[f64; 3],
    model: &LegModel,
) -> Result<[f64; 3], LegError> {
    let mut q = Vec3::from(*seed);
    for _ in 0..50 {
        let qa = [q.x, q.y, q.z];
        let err = target - fk_pos(leg, &qa, model);
        if err.norm() < 1e-12 {
            return Ok(qa.map(normalize_angle));
        }
        let j = fk_pos_jacobian(leg, &qa, model);
        let jt = j.transpose();
        let step = (jt * j + Mat3::identity() * 1e-12)
            .try_inverse()
            .map(|m| m * jt * err)
            .ok_or(LegError::IkFailed(err.norm()))?;
        q += step;
    }
    let qa = [q.x, q.y, q.z];
    let res = (target - fk_pos(leg, &qa, model)).norm();
    if res < 1e-9 {
        Ok(qa.map(normalize_angle))
    } else {
        Err(LegError::IkFailed(res))
    }
}

/// Per-foot contact orientation history, valid only within one stance phase.
#[derive(Debug, Clone, Default)]
pub struct ContactFrameTrack {
    pub prev: [Option<Rot3>; NUM_LEGS],
    pub prev_time: Option<f64>,
}

/// Fused body velocity from all feet in stance over one joint-sample interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LegVelocity {
    /// Midpoint of the sample interval, s.
    pub timestamp: f64,
    /// World frame, m/s.
    pub v: Vec3,
    pub cov: Mat3,
    /// Interval length, s.
    pub dt: f64,
    pub feet: usize,
}

/// Streaming leg odometry front end.
///
/// Each pair of consecutive joint samples yields one velocity, evaluated at
/// the interval midpoint so that the finite-difference contact rotation and
/// the kinematic terms refer to the same instant.
#[derive(Debug, Clone)]
pub struct LegOdometry {
    model: LegModel,
    /// Per-foot velocity noise, m/s.
    foot_sigma: f64,
    track: ContactFrameTrack,
    prev: Option<(JointState, Rot3)>,
}

impl LegOdometry {
    pub fn new(model: LegModel, foot_sigma: f64) -> Self {
        LegOdometry {
            model,
            foot_sigma,
            track: ContactFrameTrack::default(),
            prev: None,
        }
    }

    pub fn model(&self) -> &LegModel {
        &self.model
    }

    pub fn reset(&mut self) {
        self.track = ContactFrameTrack::default();
        self.prev = None;
    }

    /// Feeds one joint sample with its contact flags and the IMU attitude at
    /// the same instant.
    pub fn update(
        &mut self,
        joints: &JointState,
        contacts: &ContactState,
        r_wb: &Rot3,
        up_world: &Vec3,
    ) -> Option<LegVelocity> {
        let mut cur_frames: [Option<Rot3>; NUM_LEGS] = [None; NUM_LEGS];
        for (leg, frame) in cur_frames.iter_mut().enumerate() {
            if contacts.in_contact[leg] {
                *frame = Some(*r_wb * fk_rot(leg, &joints.leg_angles(leg), &self.model));
            }
        }
        let result = self.prev.as_ref().and_then(|(pj, pr)| {
            let dt = joints.timestamp - pj.timestamp;
            if dt < MIN_DT {
                return None;
            }
            let r_mid = *pr * so3_exp(&(so3_log(&(pr.transpose() * *r_wb)) * 0.5));
            let mut q_mid = [0.0; 3 * NUM_LEGS];
            let mut qd_mid = [0.0; 3 * NUM_LEGS];
            for k in 0..3 * NUM_LEGS {
                q_mid[k] = 0.5 * (pj.angles[k] + joints.angles[k]);
                qd_mid[k] = 0.5 * (pj.velocities[k] + joints.velocities[k]);
            }
            let mid = JointState {
                timestamp: 0.5 * (pj.timestamp + joints.timestamp),
                angles: q_mid,
                velocities: qd_mid,
            };
            let cov_foot = Mat3::identity() * (self.foot_sigma * self.foot_sigma);
            let mut feet = Vec::new();
            for leg in 0..NUM_LEGS {
                let (Some(prev), Some(cur)) = (self.track.prev[leg], cur_frames[leg]) else {
                    continue;
                };
                let Ok(omega_wc) = contact_angular_velocity(&prev, &cur, dt) else {
                    continue;
                };
                let (_, v) = body_velocity_rolling(
                    &r_mid,
                    leg,
                    &mid.leg_angles(leg),
                    &mid.leg_rates(leg),
                    &omega_wc,
                    &self.model,
                    up_world,
                );
                feet.push((v, cov_foot));
            }
            let (v, cov) = fuse_leg_velocity(&feet).ok()?;
            Some(LegVelocity {
                timestamp: mid.timestamp,
                v,
                cov,
                dt,
                feet: feet.len(),
            })
        });
        self.track.prev = cur_frames;
        self.track.prev_time = Some(joints.timestamp);
        self.prev = Some((*joints, *r_wb));
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{skew, vee};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_q(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..1.5),
            rng.random_range(-2.5..-0.5),
        ]
    }

    /// Rodrigues rotation written out independently of the geometry module.
    fn axis_angle(axis: [f64; 3], a: f64) -> Mat3 {
        let k = Vec3::from(axis);
        let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Mat3::identity() + kx * a.sin() + kx * kx * (1.0 - a.cos())
    }

    /// Homogeneous-transform chain built from the model description.
    fn oracle_fk(model: &LegModel, leg: usize, q: &[f64; 3]) -> (Mat3, Vec3) {
        let c = &model.legs[leg];
        let l = model.link_lengths;
        let links = [
            Vec3::new(0.0, c.side * l[0], 0.0),
            Vec3::new(0.0, 0.0, -l[1]),
            Vec3::new(0.0, 0.0, -l[2]),
        ];
        let mut t = nalgebra::Matrix4::<f64>::identity();
        t.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&Vec3::from(c.hip_offset));
        for k in 0..3 {
            let mut step = nalgebra::Matrix4::<f64>::identity();
            step.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&axis_angle(c.axes[k], q[k]));
            let mut trans = nalgebra::Matrix4::<f64>::identity();
            trans.fixed_view_mut::<3, 1>(0, 3).copy_from(&links[k]);
            t = t * step * trans;
        }
        (
            t.fixed_view::<3, 3>(0, 0).into_owned(),
            t.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    #[test]
    fn zero_angles_reference_pose() {
        let m = LegModel::default();
        for leg in 0..NUM_LEGS {
            assert_relative_eq!(*fk_rot(leg, &[0.0; 3], &m).matrix(), Mat3::identity());
            let side = m.legs[leg].side;
            let expected = m.hip(leg) + Vec3::new(0.0, 0.11 * side, -0.69);
            assert_relative_eq!(fk_pos(leg, &[0.0; 3], &m), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn abduction_only_is_single_axis_rotation() {
        let m = LegModel::default();
        let r = fk_rot(0, &[0.3, 0.0, 0.0], &m);
        assert_relative_eq!(*r.matrix(), *Rot3::rx(0.3).matrix(), epsilon = 1e-15);
    }

    #[test]
    fn knee_right_angle_planar_geometry() {
        let m = LegModel::default();
        let p = fk_pos(1, &[0.0, 0.0, std::f64::consts::FRAC_PI_2], &m);
        let expected = m.hip(1) + Vec3::new(-0.34, -0.11, -0.35);
        assert_relative_eq!(p, expected, epsilon = 1e-15);
    }

    #[test]
    fn fk_matches_transform_chain_oracle() {
        let m = LegModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let leg = rng.random_range(0..NUM_LEGS);
            let q = rand_q(&mut rng);
            let (r, p) = oracle_fk(&m, leg, &q);
            assert_relative_eq!(*fk_rot(leg, &q, &m).matrix(), r, epsilon = 1e-12);
            assert_relative_eq!(fk_pos(leg, &q, &m), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_pos_lipschitz() {
        let m = LegModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let q = rand_q(&mut rng);
            let d = [1e-3, -2e-3, 1.5e-3];
            let q2 = [q[0] + d[0], q[1] + d[1], q[2] + d[2]];
            let dn = Vec3::from(d).norm();
            assert!((fk_pos(0, &q2, &m) - fk_pos(0, &q, &m)).norm() <= m.total_reach() * dn * 1.8);
        }
    }

    #[test]
    fn zero_rates_zero_velocities() {
        let m = LegModel::default();
        let (w, v) = fk_jacobians(2, &[0.1, 0.7, -1.4], &[0.0; 3], &m);
        assert_eq!(w, Vec3::zeros());
        assert_eq!(v, Vec3::zeros());
    }

    #[test]
    fn single_knee_rate_is_axis_times_rate() {
        let m = LegModel::default();
        let (w, _) = fk_jacobians(0, &[0.2, 0.6, -1.2], &[0.0, 0.0, 1.7], &m);
        assert_relative_eq!(w, Vec3::new(0.0, 1.7, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn fk_jacobians_match_finite_differences() {
        let m = LegModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..10 {
            let leg = rng.random_range(0..NUM_LEGS);
            let q = rand_q(&mut rng);
            let qd = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let qp = [q[0] + qd[0] * h, q[1] + qd[1] * h, q[2] + qd[2] * h];
            let qm = [q[0] - qd[0] * h, q[1] - qd[1] * h, q[2] - qd[2] * h];
            let v_fd = (fk_pos(leg, &qp, &m) - fk_pos(leg, &qm, &m)) / (2.0 * h);
            let rp = *fk_rot(leg, &qp, &m).matrix();
            let rm = *fk_rot(leg, &qm, &m).matrix();
            let r = *fk_rot(leg, &q, &m).matrix();
            let rdot = (rp - rm) / (2.0 * h);
            let w_fd = vee(&(r.transpose() * rdot));
            let (w, v) = fk_jacobians(leg, &q, &qd, &m);
            assert!((v - v_fd).norm() / v.norm().max(1e-3) < 1e-5);
            assert!((w - w_fd).norm() / w.norm().max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn contact_angular_velocity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = so3_exp(&Vec3::new(0.3, -0.2, 0.9));
        assert_eq!(
            contact_angular_velocity(&r, &r, 0.01).unwrap(),
            Vec3::zeros()
        );
        let cur = r * so3_exp(&Vec3::new(0.0, 2.0 * 0.01, 0.0));
        assert_relative_eq!(
            contact_angular_velocity(&r, &cur, 0.01).unwrap(),
            Vec3::new(0.0, 2.0, 0.0),
            epsilon = 1e-12
        );
        assert!(matches!(
            contact_angular_velocity(&r, &cur, 1e-7),
            Err(LegError::DtTooSmall(_))
        ));
        for _ in 0..50 {
            let prev = so3_exp(&Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ));
            let step = Vec3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let cur = prev * so3_exp(&step);
            let w = contact_angular_velocity(&prev, &cur, 0.005).unwrap();
            let back = so3_exp(&(w * 0.005));
            assert!((back.matrix() - (prev.transpose() * cur).matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn standing_still_zero_velocity() {
        let m = LegModel::default();
        let r_wb = so3_exp(&Vec3::new(0.05, -0.1, 1.0));
        let (w, v) = body_velocity_rolling(
            &r_wb,
            1,
            &[0.0, 0.8, -1.6],
            &[0.0; 3],
            &Vec3::zeros(),
            &m,
            &Vec3::z(),
        );
        assert_eq!(w, Vec3::zeros());
        assert!(v.norm() < 1e-15);
    }

    #[test]
    fn zero_radius_matches_fixed_contact() {
        let m = LegModel {
            foot_radius: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..10 {
            let leg = rng.random_range(0..NUM_LEGS);
            let q = rand_q(&mut rng);
            let qd = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let r_wb = so3_exp(&Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            ));
            let w_wc = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            // fixed contact: the foot centre is stationary, v = -d/dt(R_WB p_C)
            let (r, p) = oracle_fk(&m, leg, &q);
            let (_, v_bc) = fk_jacobians(leg, &q, &qd, &m);
            let (w_bc, _) = fk_jacobians(leg, &q, &qd, &m);
            let w_wb = r * (w_wc - w_bc);
            let expected = -(r_wb.matrix() * skew(&w_wb) * p) - r_wb.matrix() * v_bc;
            let (_, v) = body_velocity_rolling(&r_wb, leg, &q, &qd, &w_wc, &m, &Vec3::z());
            assert!((v - expected).norm() < 1e-12);
        }
    }

    /// Kinematic simulator of one spherical foot rolling without slip on flat
    /// ground: body attitude and joint angles are prescribed functions of time
    /// and the foot centre is integrated from the rolling constraint.
    struct RollingSim {
        model: LegModel,
        leg: usize,
    }

    impl RollingSim {
        fn q(&self, t: f64) -> [f64; 3] {
            [
                0.1 * (1.3 * t).sin(),
                0.8 + 0.3 * (2.0 * t + 0.4).sin(),
                -1.6 + 0.25 * (1.7 * t).cos(),
            ]
        }
        fn qd(&self, t: f64) -> [f64; 3] {
            [
                0.13 * (1.3 * t).cos(),
                0.6 * (2.0 * t + 0.4).cos(),
                -0.425 * (1.7 * t).sin(),
            ]
        }
        fn r_wb(&self, t: f64) -> Rot3 {
            so3_exp(&Vec3::new(
                0.05 * (0.9 * t).sin(),
                0.08 * (1.1 * t).cos(),
                0.3 * t,
            ))
        }
        fn r_wc(&self, t: f64) -> Rot3 {
            self.r_wb(t) * fk_rot(self.leg, &self.q(t), &self.model)
        }
        /// World angular velocity of the contact frame by central differences.
        fn omega_wc_world(&self, t: f64) -> Vec3 {
            let h = 1e-6;
            let rd = (self.r_wc(t + h).matrix() - self.r_wc(t - h).matrix()) / (2.0 * h);
            vee(&(rd * self.r_wc(t).matrix().transpose()))
        }
        fn foot_centre_velocity(&self, t: f64) -> Vec3 {
            self.omega_wc_world(t)
                .cross(&(Vec3::z() * self.model.foot_radius))
        }
        /// Ground-truth body velocity: foot centre velocity minus d/dt(R_WB p_C).
        fn body_velocity(&self, t: f64) -> Vec3 {
            let h = 1e-6;
            let rel = |s: f64| self.r_wb(s) * fk_pos(self.leg, &self.q(s), &self.model);
            self.foot_centre_velocity(t) - (rel(t + h) - rel(t - h)) / (2.0 * h)
        }
        fn joint_state(&self, t: f64) -> JointState {
            let mut js = JointState {
                timestamp: t,
                angles: [0.0; 12],
                velocities: [0.0; 12],
            };
            let (q, qd) = (self.q(t), self.qd(t));
            for k in 0..3 {
                js.angles[3 * self.leg + k] = q[k];
                js.velocities[3 * self.leg + k] = qd[k];
            }
            js
        }
        fn max_error(&self, dt: f64, n: usize) -> f64 {
            let mut odo = LegOdometry::new(self.model.clone(), 0.05);
            let mut contacts = ContactState::default();
            contacts.in_contact[self.leg] = true;
            let mut worst: f64 = 0.0;
            for k in 0..n {
                let t = 0.7 + k as f64 * dt;
                contacts.timestamp = t;
                if let Some(out) =
                    odo.update(&self.joint_state(t), &contacts, &self.r_wb(t), &Vec3::z())
                {
                    worst = worst.max((out.v - self.body_velocity(out.timestamp)).norm());
                }
            }
            worst
        }
    }

    #[test]
    fn rolling_simulator_recovers_body_velocity() {
        let sim = RollingSim {
            model: LegModel::default(),
            leg: 0,
        };
        let err = sim.max_error(1e-4, 200);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rolling_error_converges_with_dt() {
        let sim = RollingSim {
            model: LegModel::default(),
            leg: 3,
        };
        let e1 = sim.max_error(1e-2, 20);
        let e2 = sim.max_error(1e-3, 200);
        let order = (e1 / e2).log10();
        assert!(order >= 1.0, "e1 {e1} e2 {e2}");
    }

    #[test]
    fn fusion_rules() {
        let c = Mat3::identity() * 0.01;
        let v = Vec3::new(1.0, 0.2, -0.1);
        let (m, cov) = fuse_leg_velocity(&[(v, c)]).unwrap();
        assert_eq!(m, v);
        assert_relative_eq!(cov, c, epsilon = 1e-15);
        let (m, cov) = fuse_leg_velocity(&[(v, c), (v, c)]).unwrap();
        assert_relative_eq!(m, v, epsilon = 1e-15);
        assert_relative_eq!(cov, c * 0.5, epsilon = 1e-15);
        let d = Vec3::new(0.2, -0.1, 0.05);
        let (m, cov) = fuse_leg_velocity(&[(v, c), (v + d, c)]).unwrap();
        assert_relative_eq!(m, v + d / 2.0, epsilon = 1e-14);
        for k in 0..3 {
            assert!(cov[(k, k)] >= (d[k] / 2.0).powi(2));
        }
        assert!(matches!(
            fuse_leg_velocity(&[]),
            Err(LegError::NoFootInContact)
        ));
    }

    #[test]
    fn foot_not_in_contact_rejected() {
        let m = LegModel::default();
        let js = JointState {
            timestamp: 0.0,
            angles: [0.0; 12],
            velocities: [0.0; 12],
        };
        let r = body_velocity_for_foot(
            &Rot3::identity(),
            2,
            &js,
            &ContactState::default(),
            &Vec3::zeros(),
            &m,
            &Vec3::z(),
        );
        assert!(matches!(r, Err(LegError::NoContact(2))));
    }

    #[test]
    fn ik_inverts_fk() {
        let m = LegModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..20 {
            let leg = rng.random_range(0..NUM_LEGS);
            let q = rand_q(&mut rng);
            let target = fk_pos(leg, &q, &m);
            let seed = [q[0] + 0.05, q[1] - 0.05, q[2] + 0.05];
            let sol = ik_position(leg, &target, &seed, &m).unwrap();
            assert!((fk_pos(leg, &sol, &m) - target).norm() < 1e-9);
        }
    }

    #[test]
    fn model_toml_round_trip_and_validation() {
        let m = LegModel::default();
        let back = LegModel::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.link_lengths[1] = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.legs[0].axes[1] = [0.0, 2.0, 0.0];
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.foot_radius = -0.01;
        assert!(bad.validate().is_err());
    }
}
