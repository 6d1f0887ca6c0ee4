//! Preintegrated leg-odometry displacement factor with an additive velocity bias.
//!
//! World-frame body velocities from the leg front end are summed between
//! keyframes. The residual constrains translation only:
//! `r = p_j - p_i - delta_p(b_l)`.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Mat3, Vec3};
use crate::state::{LegBias, NavState, IDX_BL, IDX_P, STATE_DIM};

pub type LegJac = SMatrix<f64, 3, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LegFactorError {
    #[error("preintegration window holds no measurement")]
    EmptyWindow,
    #[error("non-positive time step {0}")]
    BadDt(f64),
    #[error("noise parameters must be positive")]
    BadNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegNoiseParams {
    /// Velocity white noise, m/s.
    pub sigma_v: f64,
    /// Bias random walk, m/s/sqrt(s).
    pub sigma_bl: f64,
}

impl Default for LegNoiseParams {
    fn default() -> Self {
        LegNoiseParams {
            sigma_v: 0.05,
            sigma_bl: 5e-4,
        }
    }
}

impl LegNoiseParams {
    pub fn validate(&self) -> Result<(), LegFactorError> {
        if self.sigma_v > 0.0 && self.sigma_bl > 0.0 {
            Ok(())
        } else {
            Err(LegFactorError::BadNoise)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedLeg {
    /// World frame, m, at `lin_bias`.
    pub delta_p: Vec3,
    pub d_dp_d_bias: Mat3,
    pub lin_bias: LegBias,
    /// m^2
    pub cov: Mat3,
    pub dt_total: f64,
}

pub fn leg_preintegrate(
    velocities: &[(Vec3, f64)],
    lin_bias: &LegBias,
    noise: &LegNoiseParams,
) -> Result<PreintegratedLeg, LegFactorError> {
    noise.validate()?;
    if velocities.is_empty() {
        return Err(LegFactorError::EmptyWindow);
    }
    let mut delta_p = Vec3::zeros();
    let mut dt_total = 0.0;
    let mut var = 0.0;
    for &(v, dt) in velocities {
        if !(dt > 0.0) {
            return Err(LegFactorError::BadDt(dt));
        }
        delta_p += (v - lin_bias) * dt;
        dt_total += dt;
        var += noise.sigma_v * noise.sigma_v * dt * dt;
    }
    Ok(PreintegratedLeg {
        delta_p,
        d_dp_d_bias: -Mat3::identity() * dt_total,
        lin_bias: *lin_bias,
        cov: Mat3::identity() * var,
        dt_total,
    })
}

/// Displacement at `new_bias`. Exact, since the sum is linear in the bias.
pub fn leg_bias_correct(pre: &PreintegratedLeg, new_bias: &LegBias) -> Vec3 {
    pre.delta_p + pre.d_dp_d_bias * (new_bias - pre.lin_bias)
}

pub fn leg_residual(si: &NavState, sj: &NavState, pre: &PreintegratedLeg) -> Vec3 {
    sj.p - si.p - leg_bias_correct(pre, &sj.b_l)
}

/// Jacobians of [`leg_residual`] with respect to states i and j.
pub fn leg_jacobians(pre: &PreintegratedLeg) -> (LegJac, LegJac) {
    let mut ji = LegJac::zeros();
    ji.fixed_view_mut::<3, 3>(0, IDX_P)
        .copy_from(&(-Mat3::identity()));
    let mut jj = LegJac::zeros();
    jj.fixed_view_mut::<3, 3>(0, IDX_P)
        .copy_from(&Mat3::identity());
    jj.fixed_view_mut::<3, 3>(0, IDX_BL)
        .copy_from(&(-pre.d_dp_d_bias));
    (ji, jj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::StateVec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise() -> LegNoiseParams {
        LegNoiseParams::default()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn constant_velocity_ten_steps() {
        let v = vec![(Vec3::new(1.0, 0.0, 0.0), 0.05); 10];
        let pre = leg_preintegrate(&v, &Vec3::zeros(), &noise()).unwrap();
        assert_relative_eq!(pre.delta_p, Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(pre.d_dp_d_bias, -Mat3::identity() * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bias_equal_to_velocity_cancels() {
        let v = Vec3::new(0.3, -0.1, 0.05);
        let pre = leg_preintegrate(&vec![(v, 0.02); 7], &v, &noise()).unwrap();
        assert_eq!(pre.delta_p, Vec3::zeros());
    }

    #[test]
    fn matches_loop_summation_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vs: Vec<_> = (0..40)
            .map(|_| (rand_vec(&mut rng, 1.0), rng.random_range(0.001..0.01)))
            .collect();
        let b = rand_vec(&mut rng, 0.1);
        let pre = leg_preintegrate(&vs, &b, &noise()).unwrap();
        let mut x = 0.0;
        let mut y = 0.0;
        let mut z = 0.0;
        for (v, dt) in &vs {
            x += (v.x - b.x) * dt;
            y += (v.y - b.y) * dt;
            z += (v.z - b.z) * dt;
        }
        assert_eq!(pre.delta_p, Vec3::new(x, y, z));
    }

    #[test]
    fn empty_window_rejected() {
        assert_eq!(
            leg_preintegrate(&[], &Vec3::zeros(), &noise()),
            Err(LegFactorError::EmptyWindow)
        );
    }

    #[test]
    fn bias_correction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let vs: Vec<_> = (0..25)
            .map(|_| (rand_vec(&mut rng, 1.0), rng.random_range(0.001..0.01)))
            .collect();
        let b0 = rand_vec(&mut rng, 0.1);
        let pre = leg_preintegrate(&vs, &b0, &noise()).unwrap();
        assert_eq!(leg_bias_correct(&pre, &b0), pre.delta_p);
        for _ in 0..10 {
            let b = rand_vec(&mut rng, 0.5);
            let re = leg_preintegrate(&vs, &b, &noise()).unwrap();
            assert!((leg_bias_correct(&pre, &b) - re.delta_p).norm() < 1e-12);
        }
    }

    #[test]
    fn bias_correction_closed_form() {
        let pre = leg_preintegrate(&[(Vec3::zeros(), 0.5); 4], &Vec3::zeros(), &noise()).unwrap();
        let c = leg_bias_correct(&pre, &Vec3::new(0.1, 0.0, 0.0)) - pre.delta_p;
        assert_relative_eq!(c, Vec3::new(-0.2, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn residual_zero_at_linearization_point() {
        let pre = leg_preintegrate(
            &[(Vec3::new(0.4, 0.1, 0.0), 0.1); 5],
            &Vec3::zeros(),
            &noise(),
        )
        .unwrap();
        let si = NavState {
            p: Vec3::new(1.0, 2.0, 3.0),
            ..Default::default()
        };
        let sj = NavState {
            p: si.p + pre.delta_p,
            ..Default::default()
        };
        assert!(leg_residual(&si, &sj, &pre).norm() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let vs: Vec<_> = (0..10).map(|_| (rand_vec(&mut rng, 1.0), 0.02)).collect();
            let pre = leg_preintegrate(&vs, &rand_vec(&mut rng, 0.1), &noise()).unwrap();
            let si =
                NavState::default().boxplus(&StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let sj =
                NavState::default().boxplus(&StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let (ji, jj) = leg_jacobians(&pre);
            for k in 0..STATE_DIM {
                let mut d = StateVec::zeros();
                d[k] = 1e-6;
                let fi = (leg_residual(&si.boxplus(&d), &sj, &pre)
                    - leg_residual(&si.boxplus(&(-d)), &sj, &pre))
                    / 2e-6;
                let fj = (leg_residual(&si, &sj.boxplus(&d), &pre)
                    - leg_residual(&si, &sj.boxplus(&(-d)), &pre))
                    / 2e-6;
                assert!((fi - ji.column(k)).norm() <= 1e-6 * fi.norm().max(1.0));
                assert!((fj - jj.column(k)).norm() <= 1e-6 * fj.norm().max(1.0));
            }
        }
    }

    #[test]
    fn covariance_grows_with_window() {
        let v = (Vec3::new(0.2, 0.0, 0.0), 0.01);
        let mut prev = Mat3::zeros();
        for n in 1..20 {
            let pre = leg_preintegrate(&vec![v; n], &Vec3::zeros(), &noise()).unwrap();
            let diff = pre.cov - prev;
            assert!(diff.symmetric_eigenvalues().min() > 0.0);
            prev = pre.cov;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn samples() -> impl Strategy<Value = Vec<(Vec3, f64)>> {
            prop::collection::vec(
                (prop::array::uniform3(-1.5..1.5f64), 0.001..0.02f64)
                    .prop_map(|(v, dt)| (Vec3::from(v), dt)),
                1..40,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn bias_correction_matches_re_integration(
                vs in samples(),
                b0 in prop::array::uniform3(-0.2..0.2f64),
                b1 in prop::array::uniform3(-0.2..0.2f64),
            ) {
                let (b0, b1) = (Vec3::from(b0), Vec3::from(b1));
                let pre = leg_preintegrate(&vs, &b0, &noise()).unwrap();
                let fresh = leg_preintegrate(&vs, &b1, &noise()).unwrap();
                prop_assert!((leg_bias_correct(&pre, &b1) - fresh.delta_p).norm() < 1e-12);
            }

            #[test]
            fn splitting_a_window_adds_up(vs in samples(), cut in 1usize..40) {
                prop_assume!(cut < vs.len());
                let b = Vec3::zeros();
                let whole = leg_preintegrate(&vs, &b, &noise()).unwrap();
                let a = leg_preintegrate(&vs[..cut], &b, &noise()).unwrap();
                let c = leg_preintegrate(&vs[cut..], &b, &noise()).unwrap();
                prop_assert!((a.delta_p + c.delta_p - whole.delta_p).norm() < 1e-12);
                prop_assert!((a.dt_total + c.dt_total - whole.dt_total).abs() < 1e-12);
            }
        }
    }
}
