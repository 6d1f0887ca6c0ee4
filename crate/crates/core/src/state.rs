//! Keyframe navigation state shared by the factors and the smoother.

use nalgebra::SVector;

use crate::geom::{normalize_angle, ypr_compose, Rot3, Vec3, YprAngles};

/// Additive radar ego-velocity bias, m/s.
pub type RadarBias = Vec3;
/// Additive leg-odometry velocity bias, m/s.
pub type LegBias = Vec3;

/// Dimension of the optimized part of a state.
pub const STATE_DIM: usize = 13;
/// Offsets into the tangent vector.
pub const IDX_P: usize = 0;
pub const IDX_V: usize = 3;
pub const IDX_YAW: usize = 6;
pub const IDX_BR: usize = 7;
pub const IDX_BL: usize = 10;

pub type StateVec = SVector<f64, STATE_DIM>;

/// Position, velocity and yaw in the world frame plus both sensor biases.
/// Roll and pitch are carried along but never optimized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavState {
    pub timestamp: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub yaw: f64,
    pub roll: f64,
    pub pitch: f64,
    pub b_r: RadarBias,
    pub b_l: LegBias,
}

impl NavState {
    pub fn attitude(&self) -> YprAngles {
        YprAngles::new(self.roll, self.pitch, self.yaw)
    }

    pub fn rotation(&self) -> Rot3 {
        ypr_compose(&self.attitude())
    }

    /// Applies a tangent-space increment; roll and pitch are untouched.
    pub fn boxplus(&self, d: &StateVec) -> NavState {
        let mut s = *self;
        s.p += d.fixed_rows::<3>(IDX_P);
        s.v += d.fixed_rows::<3>(IDX_V);
        s.yaw = normalize_angle(self.yaw + d[IDX_YAW]);
        s.b_r += d.fixed_rows::<3>(IDX_BR);
        s.b_l += d.fixed_rows::<3>(IDX_BL);
        s
    }

    /// Tangent-space difference `self - other` with wrapped yaw.
    pub fn boxminus(&self, other: &NavState) -> StateVec {
        let mut d = StateVec::zeros();
        d.fixed_rows_mut::<3>(IDX_P).copy_from(&(self.p - other.p));
        d.fixed_rows_mut::<3>(IDX_V).copy_from(&(self.v - other.v));
        d[IDX_YAW] = normalize_angle(self.yaw - other.yaw);
        d.fixed_rows_mut::<3>(IDX_BR)
            .copy_from(&(self.b_r - other.b_r));
        d.fixed_rows_mut::<3>(IDX_BL)
            .copy_from(&(self.b_l - other.b_l));
        d
    }
}
