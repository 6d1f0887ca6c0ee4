//! Rotation kernel: skew operator, SO(3) exponential/logarithm and the
//! yaw-pitch-roll factorisation `R = Rz(yaw) * Ry(pitch) * Rx(roll)` used by
//! the 4-DoF state parametrisation.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the exponential map switches to its series form.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Pitch margin from +-pi/2 inside which yaw and roll are not separable.
pub const GIMBAL_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("gimbal lock: pitch {pitch} rad is within {GIMBAL_MARGIN} of +-pi/2")]
    GimbalLock { pitch: f64 },
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// `skew(v) * w == v.cross(w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] for an antisymmetric matrix.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rotation matrix, stored as a plain 3x3 matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rot3(Mat3);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Wraps a matrix that the caller guarantees to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rot3(m)
    }

    /// Projects an arbitrary matrix onto SO(3) (nearest rotation in Frobenius norm).
    pub fn from_matrix_orthonormalized(m: Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rot3(u * d * v_t)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rot3(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rot3 {
        Rot3(self.0.transpose())
    }

    pub fn inverse(&self) -> Rot3 {
        self.transpose()
    }

    /// Rotation about the x axis.
    pub fn rx(a: f64) -> Rot3 {
        let (s, c) = a.sin_cos();
        Rot3(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    /// Rotation about the y axis.
    pub fn ry(a: f64) -> Rot3 {
        let (s, c) = a.sin_cos();
        Rot3(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    /// Rotation about the z axis.
    pub fn rz(a: f64) -> Rot3 {
        let (s, c) = a.sin_cos();
        Rot3(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Rot3) -> f64 {
        so3_log(&(self.transpose() * *other)).norm()
    }

    /// `max |R^T R - I|` and `|det R - 1|`, whichever is larger.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Mat3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl fmt::Debug for Rot3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rot3({:?})", self.0)
    }
}

impl Default for Rot3 {
    fn default() -> Self {
        Rot3::identity()
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rot3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rot3 {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Exponential map so(3) -> SO(3) (Rodrigues).
pub fn so3_exp(w: &Vec3) -> Rot3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Rot3(Mat3::identity() + k + 0.5 * k * k);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Rot3(Mat3::identity() + a * k + b * k * k)
}

/// Logarithm map SO(3) -> so(3); the result has norm in `[0, pi]`.
pub fn so3_log(r: &Rot3) -> Vec3 {
    so3_log_with_flag(r).0
}

/// Logarithm map that also reports whether the near-pi branch was taken, where
/// the axis sign is ambiguous and precision is reduced.
pub fn so3_log_with_flag(r: &Rot3) -> (Vec3, bool) {
    let m = &r.0;
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let anti = vee(&((m - m.transpose()) * 0.5)); // = sin(theta) * axis
    let sin_theta = anti.norm();
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return (anti * (1.0 + theta * theta / 6.0), false);
    }
    if cos_theta > -0.99 {
        return (anti * (theta / sin_theta), false);
    }

    // Near pi: recover the axis from the symmetric part, (R + R^T)/2 - cos I = (1 - cos) a a^T.
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let diag = Vec3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let k = diag.imax();
    let mut axis =
        (sym.column(k) / (diag[k] * one_minus_cos).max(f64::MIN_POSITIVE).sqrt()).normalize();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    let degraded = 1.0 + (m.trace() - 1.0) * 0.5 < 1e-6;
    (axis * theta, degraded)
}

/// Roll (about x), pitch (about y), yaw (about z), each in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct YprAngles {
    roll: f64,
    pitch: f64,
    yaw: f64,
}

impl YprAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        YprAngles {
            roll: normalize_angle(roll),
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
        }
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn with_yaw(&self, yaw: f64) -> Self {
        YprAngles::new(self.roll, self.pitch, yaw)
    }
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn ypr_compose(a: &YprAngles) -> Rot3 {
    Rot3::rz(a.yaw) * Rot3::ry(a.pitch) * Rot3::rx(a.roll)
}

/// Inverse of [`ypr_compose`].
pub fn ypr_decompose(r: &Rot3) -> Result<YprAngles, GeomError> {
    let m = &r.0;
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - PI / 2.0).abs() < GIMBAL_MARGIN {
        return Err(GeomError::GimbalLock { pitch });
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Ok(YprAngles::new(roll, pitch, yaw))
}

/// Yaw of a rotation, well defined even when the pitch is degenerate enough to
/// make [`ypr_decompose`] fail.
pub fn yaw_of(r: &Rot3) -> f64 {
    let m = &r.0;
    m[(1, 0)].atan2(m[(0, 0)])
}
