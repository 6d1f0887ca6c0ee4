//! Fixed-lag radar and leg odometry smoother.
//!
//! Keyframes carry position, velocity, yaw and both velocity biases; roll and
//! pitch follow the IMU. Between consecutive keyframes the window holds a
//! preintegrated radar factor, a preintegrated leg factor, bias random walks
//! and an IMU heading-change factor.

mod attitude;
mod window;

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attitude::{gravity_roll_pitch, AttitudeParams, AttitudeProvider};
pub use window::{
    Factor, FactorKind, FactorTag, MarginalPrior, OptimizeReport, SlidingWindow, SolverParams,
};

use crate::geom::{normalize_angle, yaw_of, Mat3, Rot3, Vec3};
use crate::io_dataset::{Pose, SensorLog, Trajectory};
use crate::leg_factor::{leg_preintegrate, LegFactorError, LegNoiseParams};
use crate::leg_kin::{LegModel, LegOdometry, LegVelocity};
use crate::radar_ego::{estimate_ego_velocity, EgoVelEstimate, RansacParams};
use crate::radar_factor::{
    radar_preintegrate, RadarFactorError, RadarNoiseParams, RadarReference, RadarStep,
};
use crate::state::{NavState, StateVec, IDX_BL, IDX_BR, IDX_P, IDX_V, IDX_YAW};

/// Two timestamps closer than this are the same instant.
const TIME_EPS: f64 = 1e-9;
/// Leg windows covering less than this share of the keyframe interval are dropped.
const MIN_LEG_COVERAGE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no IMU attitude within {guard} s of t = {t}")]
    OutOfRange { t: f64, guard: f64 },
    #[error("keyframe time {t} is not after {last}")]
    NonMonotoneTime { t: f64, last: f64 },
    #[error("normal equations could not be factorized")]
    NumericalFailure,
    #[error("window is empty")]
    EmptyWindow,
    #[error("keyframe {0} is not in the window")]
    UnknownState(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Radar(#[from] RadarFactorError),
    #[error(transparent)]
    Leg(#[from] LegFactorError),
    #[error("parsing configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("reading configuration: {0}")]
    Io(#[from] std::io::Error),
}

/// Standard deviations of the prior on the first keyframe. Horizontal leg
/// bias (slip) and vertical radar bias (elevation error) start loose; the
/// other axes are pinned so the two biases cannot trade a common offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialPrior {
    pub position: f64,
    pub yaw: f64,
    pub velocity: f64,
    /// Per body axis.
    pub radar_bias: [f64; 3],
    /// Per world axis.
    pub leg_bias: [f64; 3],
}

impl Default for InitialPrior {
    fn default() -> Self {
        InitialPrior {
            position: 1e-6,
            yaw: 1e-6,
            velocity: 1.0,
            radar_bias: [1e-3, 1e-3, 0.05],
            leg_bias: [0.1, 0.1, 1e-3],
        }
    }
}

impl InitialPrior {
    fn sqrt_info(&self) -> DMatrix<f64> {
        let mut s = StateVec::zeros();
        for k in 0..3 {
            s[IDX_P + k] = 1.0 / self.position;
            s[IDX_V + k] = 1.0 / self.velocity;
            s[IDX_BR + k] = 1.0 / self.radar_bias[k];
            s[IDX_BL + k] = 1.0 / self.leg_bias[k];
        }
        s[IDX_YAW] = 1.0 / self.yaw;
        DMatrix::from_diagonal(&DVector::from_column_slice(s.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub use_radar: bool,
    pub use_leg: bool,
    /// False evaluates leg velocities with a zero foot radius.
    pub rolling_contact: bool,
    /// Added in quadrature to every ego-velocity covariance, m/s.
    pub ego_sigma_floor: f64,
    /// Cauchy scale on whitened radar residuals; 0 disables the kernel.
    pub radar_cauchy: f64,
    /// Per-foot velocity noise in the leg front end, m/s.
    pub foot_sigma: f64,
    /// Heading-change noise between keyframes, rad/sqrt(s).
    pub yaw_rate_sigma: f64,
    /// Random walk of the vertical leg bias, m/s/sqrt(s). The horizontal axes
    /// use `leg_noise.sigma_bl`, which is loose enough to follow slip through
    /// turns.
    pub leg_bias_walk_vertical: f64,
    pub solver: SolverParams,
    pub ransac: RansacParams,
    pub radar_noise: RadarNoiseParams,
    pub leg_noise: LegNoiseParams,
    pub attitude: AttitudeParams,
    pub prior: InitialPrior,
    pub leg_model: LegModel,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            use_radar: true,
            use_leg: true,
            rolling_contact: true,
            ego_sigma_floor: 0.02,
            radar_cauchy: 1.0,
            foot_sigma: 0.05,
            yaw_rate_sigma: 0.002,
            leg_bias_walk_vertical: 5e-4,
            solver: SolverParams::default(),
            ransac: RansacParams::default(),
            radar_noise: RadarNoiseParams::default(),
            leg_noise: LegNoiseParams {
                sigma_bl: 0.05,
                ..Default::default()
            },
            attitude: AttitudeParams::default(),
            prior: InitialPrior::default(),
            leg_model: LegModel::default(),
        }
    }
}

/// Sensor configurations compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    RadarOnly,
    LegOnly,
    Full,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::RadarOnly => "radar",
            Mode::LegOnly => "leg",
            Mode::Full => "full",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = EstimatorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "radar" => Ok(Mode::RadarOnly),
            "leg" => Ok(Mode::LegOnly),
            "full" => Ok(Mode::Full),
            _ => Err(EstimatorError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        self.solver.validate()?;
        self.ransac
            .validate()
            .map_err(|e| EstimatorError::Config(e.to_string()))?;
        self.leg_noise.validate()?;
        self.leg_model
            .validate()
            .map_err(|e| EstimatorError::Config(e.to_string()))?;
        if !self.use_radar && !self.use_leg {
            return Err(EstimatorError::Config("radar and leg both disabled".into()));
        }
        let positive = [
            self.ego_sigma_floor,
            self.foot_sigma,
            self.yaw_rate_sigma,
            self.leg_bias_walk_vertical,
            self.radar_noise.bias_walk,
            self.prior.position,
            self.prior.yaw,
            self.prior.velocity,
        ]
        .into_iter()
        .chain(self.prior.radar_bias)
        .chain(self.prior.leg_bias);
        if positive.into_iter().any(|x| !(x > 0.0)) || self.radar_cauchy < 0.0 {
            return Err(EstimatorError::Config(
                "noise parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, EstimatorError> {
        let c: EstimatorConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.use_radar = mode != Mode::LegOnly;
        c.use_leg = mode != Mode::RadarOnly;
        c
    }

    fn cauchy(&self) -> Option<f64> {
        (self.radar_cauchy > 0.0).then_some(self.radar_cauchy)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub scans: usize,
    pub valid_scans: usize,
    pub leg_velocities: usize,
    pub keyframes: usize,
    pub radar_factors: usize,
    pub leg_factors: usize,
    pub lm_iterations: usize,
    /// Wall time of the whole run, s.
    pub elapsed: f64,
}

impl RunStats {
    /// Mean processing time per radar scan, ms.
    pub fn ms_per_scan(&self) -> f64 {
        1e3 * self.elapsed / self.scans.max(1) as f64
    }
}

/// One window solve, run after keyframe `timestamp` was added.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeSolve {
    pub timestamp: f64,
    /// Largest raw residual entry over all factors before the solve.
    pub max_residual: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Full keyframe states as they left the window.
    pub states: Vec<NavState>,
    pub solves: Vec<KeyframeSolve>,
    pub stats: RunStats,
}

/// Initial guess for the keyframe at a given time. Roll and pitch are always
/// taken from the IMU.
pub type KeyframeSeed<'a> = &'a dyn Fn(f64) -> Option<NavState>;

/// Sample held over the interval `(start, end]`.
#[derive(Debug, Clone, Copy)]
struct HeldVelocity {
    start: f64,
    end: f64,
    v: Vec3,
}

struct Pipeline<'a> {
    config: &'a EstimatorConfig,
    attitude: AttitudeProvider,
    scans: Vec<EgoVelEstimate>,
    legs: Vec<HeldVelocity>,
    window: SlidingWindow,
    seed: Option<KeyframeSeed<'a>>,
    out: Vec<NavState>,
    solves: Vec<KeyframeSolve>,
    stats: RunStats,
}

fn to_pose(s: &NavState) -> Pose {
    Pose {
        timestamp: s.timestamp,
        p: s.p,
        r: s.rotation(),
    }
}

/// Replays a log through the front ends and the smoother. Every keyframe is
/// emitted once, when it leaves the window or at the end of the log.
pub fn process_log(log: &SensorLog, config: &EstimatorConfig) -> Result<RunOutput, EstimatorError> {
    run_pipeline(log, config, None)
}

/// As [`process_log`], with keyframes initialized by `seed` wherever it
/// returns a state instead of by dead reckoning.
pub fn process_log_seeded(
    log: &SensorLog,
    config: &EstimatorConfig,
    seed: KeyframeSeed<'_>,
) -> Result<RunOutput, EstimatorError> {
    run_pipeline(log, config, Some(seed))
}

fn run_pipeline(
    log: &SensorLog,
    config: &EstimatorConfig,
    seed: Option<KeyframeSeed<'_>>,
) -> Result<RunOutput, EstimatorError> {
    config.validate()?;
    let started = Instant::now();
    let mut attitude = AttitudeProvider::from_imu(&log.imu, &config.attitude);
    let mut stats = RunStats {
        scans: log.radar.len(),
        ..Default::default()
    };

    let scans: Vec<EgoVelEstimate> = if config.use_radar {
        log.radar
            .iter()
            .map(|s| estimate_ego_velocity(s, &config.ransac))
            .filter(|e| e.valid)
            .collect()
    } else {
        Vec::new()
    };
    stats.valid_scans = scans.len();

    let start = if config.use_radar {
        scans
            .iter()
            .map(|e| e.timestamp)
            .find(|&t| attitude.rotation_at(t).is_ok())
    } else {
        log.joints
            .iter()
            .map(|j| j.timestamp)
            .find(|&t| attitude.rotation_at(t).is_ok())
    };
    let Some(t0) = start else {
        stats.elapsed = started.elapsed().as_secs_f64();
        return Ok(RunOutput {
            stats,
            ..Default::default()
        });
    };
    attitude.set_yaw_reference(t0)?;

    let legs = if config.use_leg {
        leg_front_end(log, config, &attitude)
    } else {
        Vec::new()
    };
    stats.leg_velocities = legs.len();

    let mut p = Pipeline {
        config,
        attitude,
        scans,
        legs,
        window: SlidingWindow::new(config.solver, config.cauchy()),
        seed,
        out: Vec::new(),
        solves: Vec::new(),
        stats,
    };
    let times = p.keyframe_times(t0, log);
    p.run(&times)?;
    p.stats.elapsed = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        trajectory: Trajectory {
            poses: p.out.iter().map(to_pose).collect(),
        },
        states: p.out,
        solves: p.solves,
        stats: p.stats,
    })
}

fn leg_front_end(
    log: &SensorLog,
    config: &EstimatorConfig,
    attitude: &AttitudeProvider,
) -> Vec<HeldVelocity> {
    let mut model = config.leg_model.clone();
    if !config.rolling_contact {
        model.foot_radius = 0.0;
    }
    let mut odo = LegOdometry::new(model, config.foot_sigma);
    let mut out = Vec::new();
    let mut c = 0;
    for js in &log.joints {
        while c + 1 < log.contacts.len() && log.contacts[c + 1].timestamp <= js.timestamp + TIME_EPS
        {
            c += 1;
        }
        let (Some(contacts), Ok(r_wb)) = (log.contacts.get(c), attitude.rotation_at(js.timestamp))
        else {
            odo.reset();
            continue;
        };
        if let Some(LegVelocity {
            timestamp, v, dt, ..
        }) = odo.update(js, contacts, &r_wb, &Vec3::z())
        {
            out.push(HeldVelocity {
                start: timestamp - 0.5 * dt,
                end: timestamp + 0.5 * dt,
                v,
            });
        }
    }
    out
}

impl Pipeline<'_> {
    fn keyframe_times(&self, t0: f64, log: &SensorLog) -> Vec<f64> {
        let period = self.config.solver.keyframe_period;
        let mut end = f64::INFINITY;
        if self.config.use_radar {
            end = end.min(log.radar.last().map_or(t0, |s| s.timestamp));
        }
        if self.config.use_leg {
            end = end.min(self.legs.last().map_or(t0, |l| l.end));
        }
        if let Some((_, t_imu)) = self.attitude.span() {
            end = end.min(t_imu + self.config.attitude.guard);
        }
        let mut times = vec![t0];
        if self.config.use_radar {
            for e in &self.scans {
                let last = *times.last().expect("non-empty");
                if e.timestamp > end + TIME_EPS {
                    break;
                }
                // keep keyframes no further apart than two periods
                let mut last = last;
                while e.timestamp > last + 2.0 * period + TIME_EPS {
                    last += 2.0 * period;
                    times.push(last);
                }
                if e.timestamp >= last + period - TIME_EPS {
                    times.push(e.timestamp);
                }
            }
        } else {
            let mut t = t0 + period;
            while t <= end + TIME_EPS {
                times.push(t);
                t += period;
            }
        }
        times
    }

    fn run(&mut self, times: &[f64]) -> Result<(), EstimatorError> {
        let first = self.initial_state(times[0])?;
        let id = self.window.push_state(first)?;
        self.window.add_factor(
            id,
            id,
            FactorKind::Prior {
                mean: first,
                sqrt_info: self.config.prior.sqrt_info(),
                offset: StateVec::zeros(),
            },
        )?;
        for w in times.windows(2) {
            self.add_keyframe(w[0], w[1])?;
            let max_residual = self
                .window
                .residuals()
                .iter()
                .map(|(_, r)| r.amax())
                .fold(0.0, f64::max);
            let report = self.window.optimize()?;
            self.stats.lm_iterations += report.iterations;
            self.solves.push(KeyframeSolve {
                timestamp: w[1],
                max_residual,
                initial_cost: report.cost_trace[0],
                final_cost: report.final_cost,
                iterations: report.iterations,
            });
            if let Some(old) = self.window.slide()? {
                self.out.push(old);
            }
        }
        self.stats.keyframes = times.len();
        self.out.extend(self.window.drain());
        Ok(())
    }

    fn roll_pitch(&self, t: f64) -> Result<(f64, f64), EstimatorError> {
        let a = self.attitude.attitude_at(t)?;
        Ok((a.roll(), a.pitch()))
    }

    fn scan_at(&self, t: f64) -> Option<&EgoVelEstimate> {
        let k = self.scans.partition_point(|e| e.timestamp < t - TIME_EPS);
        self.scans
            .get(k)
            .filter(|e| (e.timestamp - t).abs() <= TIME_EPS)
    }

    fn ego_cov(&self, e: &EgoVelEstimate) -> Mat3 {
        e.covariance + Mat3::identity() * self.config.ego_sigma_floor.powi(2)
    }

    fn seeded(&self, t: f64, roll: f64, pitch: f64) -> Option<NavState> {
        let s = (self.seed?)(t)?;
        Some(NavState {
            timestamp: t,
            roll,
            pitch,
            ..s
        })
    }

    fn initial_state(&self, t0: f64) -> Result<NavState, EstimatorError> {
        let (roll, pitch) = self.roll_pitch(t0)?;
        if let Some(s) = self.seeded(t0, roll, pitch) {
            return Ok(s);
        }
        let r = self.attitude.rotation_at(t0)?;
        let v = match self.scan_at(t0) {
            Some(e) => r * e.v_hat,
            None => self
                .legs
                .iter()
                .find(|l| l.end >= t0)
                .map_or(Vec3::zeros(), |l| l.v),
        };
        Ok(NavState {
            timestamp: t0,
            v,
            roll,
            pitch,
            ..Default::default()
        })
    }

    /// Ego velocities between two keyframes, each held from the midpoint with
    /// its predecessor to the midpoint with its successor. The flag is true
    /// when a scan lands on `tj`.
    fn radar_steps(&self, ti: f64, tj: f64) -> Result<(Vec<RadarStep>, bool), EstimatorError> {
        let hi = self.scans.partition_point(|e| e.timestamp <= tj + TIME_EPS);
        let lo = self
            .scans
            .partition_point(|e| e.timestamp <= ti + TIME_EPS)
            .saturating_sub(1);
        let mut steps = Vec::new();
        for k in lo..hi {
            let t = self.scans[k].timestamp;
            let start = match k.checked_sub(1) {
                Some(p) => 0.5 * (self.scans[p].timestamp + t),
                None => t,
            };
            let end = match self.scans.get(k + 1) {
                Some(n) if k + 1 < hi => 0.5 * (t + n.timestamp),
                _ => tj,
            };
            let dt = end.min(tj) - start.max(ti);
            if dt <= TIME_EPS {
                continue;
            }
            let e = &self.scans[k];
            steps.push(RadarStep {
                v_hat: e.v_hat,
                cov: self.ego_cov(e),
                attitude: self.attitude.rotation_at(t)?,
                dt,
            });
        }
        let at_end = hi > 0 && (self.scans[hi - 1].timestamp - tj).abs() <= TIME_EPS;
        Ok((steps, at_end))
    }

    fn leg_steps(&self, ti: f64, tj: f64) -> Vec<(Vec3, f64)> {
        let lo = self.legs.partition_point(|l| l.end <= ti);
        self.legs[lo..]
            .iter()
            .take_while(|l| l.start < tj)
            .filter_map(|l| {
                let dt = l.end.min(tj) - l.start.max(ti);
                (dt > TIME_EPS).then_some((l.v, dt))
            })
            .collect()
    }

    fn add_keyframe(&mut self, ti: f64, tj: f64) -> Result<(), EstimatorError> {
        let cfg = self.config;
        let i = self.window.last_id().ok_or(EstimatorError::EmptyWindow)?;
        let si = *self.window.state(i).expect("last id is live");
        let dt = tj - ti;
        let (roll, pitch) = self.roll_pitch(tj)?;
        let r_i = self.attitude.rotation_at(ti)?;
        let r_j = self.attitude.rotation_at(tj)?;
        let yaw_delta = normalize_angle(yaw_of(&r_j) - yaw_of(&r_i));

        let radar = if cfg.use_radar {
            let (steps, at_end) = self.radar_steps(ti, tj)?;
            if steps.is_empty() {
                None
            } else {
                let reference = self.scan_at(ti).map(|e| RadarReference {
                    v_hat: e.v_hat,
                    cov: self.ego_cov(e),
                });
                let mut pre = radar_preintegrate(
                    &steps,
                    &r_i,
                    reference.as_ref(),
                    &si.b_r,
                    &cfg.radar_noise,
                )?;
                pre.velocity_at_end = at_end;
                Some(pre)
            }
        } else {
            None
        };
        let leg = if cfg.use_leg {
            let steps = self.leg_steps(ti, tj);
            let covered: f64 = steps.iter().map(|s| s.1).sum();
            if covered >= MIN_LEG_COVERAGE * dt {
                Some(leg_preintegrate(&steps, &si.b_l, &cfg.leg_noise)?)
            } else {
                None
            }
        } else {
            None
        };

        // dead-reckoned initial guess
        let mut sj = NavState {
            timestamp: tj,
            yaw: normalize_angle(si.yaw + yaw_delta),
            roll,
            pitch,
            ..si
        };
        sj.p = si.p + si.v * dt;
        if let Some(pre) = &leg {
            sj.p = si.p + pre.delta_p;
            sj.v = pre.delta_p / pre.dt_total;
        }
        if let Some(pre) = &radar {
            if pre.has_reference {
                sj.p = si.p + si.v * pre.dt_total + si.rotation() * pre.corrected_delta_p(&si.b_r);
            }
            if pre.velocity_at_end {
                sj.v = pre.corrected_last_v(&si.b_r);
            }
        }
        if let Some(s) = self.seeded(tj, roll, pitch) {
            sj = s;
        }

        let j = self.window.push_state(sj)?;
        match radar {
            Some(pre) => {
                self.stats.radar_factors += 1;
                self.window.add_factor(i, j, FactorKind::Radar(pre))?
            }
            None => self.window.add_factor(
                i,
                j,
                FactorKind::RadarBiasWalk(cfg.radar_noise.bias_walk.powi(2) * dt),
            )?,
        }
        if let Some(pre) = leg {
            self.stats.leg_factors += 1;
            self.window.add_factor(i, j, FactorKind::Leg(pre))?;
        }
        self.window.add_factor(
            i,
            j,
            FactorKind::LegBiasWalk(
                Vec3::new(
                    cfg.leg_noise.sigma_bl,
                    cfg.leg_noise.sigma_bl,
                    cfg.leg_bias_walk_vertical,
                )
                .map(|s| s * s * dt),
            ),
        )?;
        self.window.add_factor(
            i,
            j,
            FactorKind::YawDelta {
                delta: yaw_delta,
                var: cfg.yaw_rate_sigma.powi(2) * dt,
            },
        )?;
        Ok(())
    }
}

/// World-from-body rotation of a pose with yaw replaced.
pub fn with_yaw(r: &Rot3, yaw: f64) -> Rot3 {
    Rot3::rz(yaw - yaw_of(r)) * *r
}
