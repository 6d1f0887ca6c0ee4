//! Roll and pitch from the IMU, taken from its orientation output when present
//! and otherwise from a complementary filter over gyro and accelerometer.

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::geom::{
    normalize_angle, so3_exp, so3_log, yaw_of, ypr_compose, ypr_decompose, Rot3, Vec3, YprAngles,
};
use crate::io_dataset::ImuSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttitudeParams {
    /// Per-sample pull of roll and pitch toward the accelerometer tilt.
    pub filter_gain: f64,
    /// Largest distance from the nearest IMU sample a query may have, s.
    pub guard: f64,
    /// Prefer the IMU's own orientation output when every sample has one.
    pub use_orientation: bool,
}

impl Default for AttitudeParams {
    fn default() -> Self {
        AttitudeParams {
            filter_gain: 0.02,
            guard: 0.05,
            use_orientation: true,
        }
    }
}

/// Roll and pitch implied by a specific-force reading at rest.
pub fn gravity_roll_pitch(f: &Vec3) -> (f64, f64) {
    let roll = f.y.atan2(f.z);
    let pitch = (-f.x).atan2((f.y * f.y + f.z * f.z).sqrt());
    (roll, pitch)
}

#[derive(Debug, Clone, Default)]
pub struct AttitudeProvider {
    times: Vec<f64>,
    rots: Vec<Rot3>,
    guard: f64,
    yaw_reference: f64,
}

impl AttitudeProvider {
    pub fn from_imu(samples: &[ImuSample], params: &AttitudeParams) -> Self {
        let times = samples.iter().map(|s| s.timestamp).collect();
        let have_orientation =
            !samples.is_empty() && samples.iter().all(|s| s.orientation.is_some());
        let rots = if params.use_orientation && have_orientation {
            samples
                .iter()
                .map(|s| s.orientation.expect("checked above"))
                .collect()
        } else {
            complementary_filter(samples, params.filter_gain)
        };
        AttitudeProvider {
            times,
            rots,
            guard: params.guard,
            yaw_reference: 0.0,
        }
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.times.last()?))
    }

    fn raw_at(&self, t: f64) -> Result<Rot3, EstimatorError> {
        let out = EstimatorError::OutOfRange {
            t,
            guard: self.guard,
        };
        let n = self.times.len();
        if n == 0 {
            return Err(out);
        }
        let idx = self.times.partition_point(|&s| s < t);
        if idx == 0 {
            return if self.times[0] - t <= self.guard {
                Ok(self.rots[0])
            } else {
                Err(out)
            };
        }
        if idx == n {
            return if t - self.times[n - 1] <= self.guard {
                Ok(self.rots[n - 1])
            } else {
                Err(out)
            };
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        if (t - t0).min(t1 - t) > self.guard {
            return Err(out);
        }
        let (r0, r1) = (self.rots[idx - 1], self.rots[idx]);
        let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        Ok(r0 * so3_exp(&(so3_log(&(r0.transpose() * r1)) * f)))
    }

    /// Makes the heading at `t` the zero of all reported yaw angles.
    pub fn set_yaw_reference(&mut self, t: f64) -> Result<(), EstimatorError> {
        self.yaw_reference = 0.0;
        self.yaw_reference = yaw_of(&self.raw_at(t)?);
        Ok(())
    }

    /// World-from-body rotation at `t` with the heading re-referenced.
    pub fn rotation_at(&self, t: f64) -> Result<Rot3, EstimatorError> {
        Ok(Rot3::rz(-self.yaw_reference) * self.raw_at(t)?)
    }

    pub fn attitude_at(&self, t: f64) -> Result<YprAngles, EstimatorError> {
        let r = self.rotation_at(t)?;
        ypr_decompose(&r).map_err(|_| EstimatorError::OutOfRange {
            t,
            guard: self.guard,
        })
    }
}

fn complementary_filter(samples: &[ImuSample], gain: f64) -> Vec<Rot3> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let (r0, p0) = gravity_roll_pitch(&first.linear_acceleration);
    let mut r = ypr_compose(&YprAngles::new(r0, p0, 0.0));
    let mut out = Vec::with_capacity(samples.len());
    out.push(r);
    for w in samples.windows(2) {
        let dt = w[1].timestamp - w[0].timestamp;
        let omega = (w[0].angular_velocity + w[1].angular_velocity) * 0.5;
        r = r * so3_exp(&(omega * dt));
        if let Ok(ypr) = ypr_decompose(&r) {
            let (ra, pa) = gravity_roll_pitch(&w[1].linear_acceleration);
            let roll = ypr.roll() + gain * normalize_angle(ra - ypr.roll());
            let pitch = ypr.pitch() + gain * (pa - ypr.pitch());
            r = ypr_compose(&YprAngles::new(roll, pitch, ypr.yaw()));
        }
        out.push(r);
    }
    out
}
