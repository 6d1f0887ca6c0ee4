//! Preintegrated radar ego-velocity and the yaw-only radar velocity factor.
//!
//! Ego-velocities measured between two keyframes are rotated into the body
//! frame of the first keyframe and summed. When the ego-velocity at the first
//! keyframe is known (`reference`), the displacement is taken relative to
//! constant-velocity motion so that it pairs with `R_i^T (p_j - p_i - v_i dt)`.
//!
//! Residual layout (9 rows): displacement, end velocity, bias change.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{skew, Mat3, Rot3, Vec3};
use crate::radar_ego::EgoVelEstimate;
use crate::state::{NavState, RadarBias, IDX_BR, IDX_P, IDX_V, IDX_YAW, STATE_DIM};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;
pub type RadarJac = SMatrix<f64, 9, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadarFactorError {
    #[error("preintegration window holds no measurement")]
    EmptyWindow,
    #[error("non-positive time step {0}")]
    BadDt(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarNoiseParams {
    /// Bias random walk, m/s/sqrt(s).
    pub bias_walk: f64,
}

impl Default for RadarNoiseParams {
    fn default() -> Self {
        RadarNoiseParams { bias_walk: 1e-3 }
    }
}

/// One ego-velocity sample held over `dt` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarStep {
    /// Sensor-frame velocity, m/s.
    pub v_hat: Vec3,
    pub cov: Mat3,
    /// World-from-body attitude at the sample.
    pub attitude: Rot3,
    pub dt: f64,
}

impl RadarStep {
    pub fn from_estimate(est: &EgoVelEstimate, attitude: Rot3, dt: f64) -> Self {
        RadarStep {
            v_hat: est.v_hat,
            cov: est.covariance,
            attitude,
            dt,
        }
    }
}

/// Ego-velocity measured at the first keyframe of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarReference {
    pub v_hat: Vec3,
    pub cov: Mat3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedRadar {
    /// Body frame of keyframe i, evaluated at `lin_bias`.
    pub delta_p: Vec3,
    pub d_dp_d_bias: Mat3,
    /// World frame, evaluated at `lin_bias`.
    pub last_v: Vec3,
    pub d_v_d_bias: Mat3,
    pub lin_bias: RadarBias,
    /// Covariance of the 9-row residual.
    pub cov: Mat9,
    pub dt_total: f64,
    /// The displacement rows are meaningful only when the window was built
    /// with a reference velocity at keyframe i.
    pub has_reference: bool,
    /// The last measurement was taken at keyframe j.
    pub velocity_at_end: bool,
}

impl PreintegratedRadar {
    /// Displacement at bias `b`. Exact, since the model is linear in the bias.
    pub fn corrected_delta_p(&self, b: &RadarBias) -> Vec3 {
        self.delta_p + self.d_dp_d_bias * (b - self.lin_bias)
    }

    pub fn corrected_last_v(&self, b: &RadarBias) -> Vec3 {
        self.last_v + self.d_v_d_bias * (b - self.lin_bias)
    }

    /// Residual rows that carry information for this window.
    pub fn active_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(9);
        if self.has_reference {
            rows.extend(0..3);
        }
        if self.velocity_at_end {
            rows.extend(3..6);
        }
        rows.extend(6..9);
        rows
    }
}

/// Preintegrates `steps` between keyframes i and j. `frame_i` is the IMU
/// attitude at keyframe i.
pub fn radar_preintegrate(
    steps: &[RadarStep],
    frame_i: &Rot3,
    reference: Option<&RadarReference>,
    lin_bias: &RadarBias,
    noise: &RadarNoiseParams,
) -> Result<PreintegratedRadar, RadarFactorError> {
    let last = steps.last().ok_or(RadarFactorError::EmptyWindow)?;
    let ri_t = frame_i.transpose();
    let mut delta_p = Vec3::zeros();
    let mut d_dp = Mat3::zeros();
    let mut cov_dp = Mat3::zeros();
    let mut dt_total = 0.0;
    for s in steps {
        if !(s.dt > 0.0) {
            return Err(RadarFactorError::BadDt(s.dt));
        }
        let r_rel = *(ri_t * s.attitude).matrix();
        delta_p += r_rel * (s.v_hat - lin_bias) * s.dt;
        d_dp -= r_rel * s.dt;
        cov_dp += r_rel * s.cov * r_rel.transpose() * (s.dt * s.dt);
        dt_total += s.dt;
    }
    if let Some(r) = reference {
        delta_p -= (r.v_hat - lin_bias) * dt_total;
        d_dp += Mat3::identity() * dt_total;
        cov_dp += r.cov * (dt_total * dt_total);
    }

    let r_last = *last.attitude.matrix();
    let last_v = r_last * (last.v_hat - lin_bias);
    let cov_v = r_last * last.cov * r_last.transpose();
    let r_rel_last = *(ri_t * last.attitude).matrix();
    let cov_dp_v = r_rel_last * last.cov * r_last.transpose() * last.dt;

    let mut cov = Mat9::zeros();
    cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&cov_dp);
    cov.fixed_view_mut::<3, 3>(3, 3).copy_from(&cov_v);
    cov.fixed_view_mut::<3, 3>(0, 3).copy_from(&cov_dp_v);
    cov.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&cov_dp_v.transpose());
    let walk = noise.bias_walk * noise.bias_walk * dt_total;
    cov.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(Mat3::identity() * walk));

    Ok(PreintegratedRadar {
        delta_p,
        d_dp_d_bias: d_dp,
        last_v,
        d_v_d_bias: -r_last,
        lin_bias: *lin_bias,
        cov: (cov + cov.transpose()) * 0.5,
        dt_total,
        has_reference: reference.is_some(),
        velocity_at_end: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarResidual {
    pub r_dp: Vec3,
    pub r_v: Vec3,
    pub r_db: Vec3,
}

impl RadarResidual {
    pub fn to_vector(&self) -> Vec9 {
        let mut r = Vec9::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&self.r_dp);
        r.fixed_rows_mut::<3>(3).copy_from(&self.r_v);
        r.fixed_rows_mut::<3>(6).copy_from(&self.r_db);
        r
    }
}

fn relative_translation(si: &NavState, sj: &NavState, dt: f64) -> Vec3 {
    sj.p - si.p - si.v * dt
}

pub fn radar_residual(si: &NavState, sj: &NavState, pre: &PreintegratedRadar) -> RadarResidual {
    let u = relative_translation(si, sj, pre.dt_total);
    RadarResidual {
        r_dp: si.rotation().transpose() * u - pre.corrected_delta_p(&sj.b_r),
        r_v: sj.v - pre.corrected_last_v(&sj.b_r),
        r_db: sj.b_r - si.b_r,
    }
}

/// Jacobians of the 9-row residual with respect to both optimized states.
/// Roll and pitch columns are reported separately and are zero by contract:
/// those angles are not optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarJacobians {
    pub d_state_i: RadarJac,
    pub d_state_j: RadarJac,
    pub d_roll_pitch_i: SMatrix<f64, 9, 2>,
    pub d_roll_pitch_j: SMatrix<f64, 9, 2>,
}

pub fn radar_jacobians(si: &NavState, sj: &NavState, pre: &PreintegratedRadar) -> RadarJacobians {
    let dt = pre.dt_total;
    let ri_t = *si.rotation().transpose().matrix();
    let u = relative_translation(si, sj, dt);
    let w = Rot3::rz(si.yaw).transpose() * u;
    let rp_t = *(Rot3::rx(si.roll).transpose() * Rot3::ry(si.pitch).transpose()).matrix();
    let d_yaw = (rp_t * skew(&w)).column(2).into_owned();

    let mut ji = RadarJac::zeros();
    ji.fixed_view_mut::<3, 3>(0, IDX_P).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(0, IDX_V).copy_from(&(-ri_t * dt));
    ji.fixed_view_mut::<3, 1>(0, IDX_YAW).copy_from(&d_yaw);
    ji.fixed_view_mut::<3, 3>(6, IDX_BR)
        .copy_from(&(-Mat3::identity()));

    let mut jj = RadarJac::zeros();
    jj.fixed_view_mut::<3, 3>(0, IDX_P).copy_from(&ri_t);
    jj.fixed_view_mut::<3, 3>(0, IDX_BR)
        .copy_from(&(-pre.d_dp_d_bias));
    jj.fixed_view_mut::<3, 3>(3, IDX_V)
        .copy_from(&Mat3::identity());
    jj.fixed_view_mut::<3, 3>(3, IDX_BR)
        .copy_from(&(-pre.d_v_d_bias));
    jj.fixed_view_mut::<3, 3>(6, IDX_BR)
        .copy_from(&Mat3::identity());

    RadarJacobians {
        d_state_i: ji,
        d_state_j: jj,
        d_roll_pitch_i: SMatrix::zeros(),
        d_roll_pitch_j: SMatrix::zeros(),
    }
}
