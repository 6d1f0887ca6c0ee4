//! Fixed-lag window of keyframe states, its factors, and the
//! Levenberg-Marquardt solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::geom::{normalize_angle, Vec3};
use crate::leg_factor::{leg_jacobians, leg_residual, PreintegratedLeg};
use crate::radar_factor::{radar_jacobians, radar_residual, PreintegratedRadar};
use crate::state::{NavState, StateVec, IDX_BL, IDX_BR, IDX_V, IDX_YAW, STATE_DIM};

/// Below this the problem counts as solved.
const COST_FLOOR: f64 = 1e-20;
const DIAG_FLOOR: f64 = 1e-9;
const LAMBDA_MAX: f64 = 1e12;
/// Curvature added to velocity coordinates no factor observes.
const GAUGE_INFO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_scale: f64,
    /// Relative cost decrease below which the solve stops.
    pub convergence_tol: f64,
    pub window_size: usize,
    /// s
    pub keyframe_period: f64,
    /// How the oldest state is summarized when it leaves the window.
    pub marginal: MarginalPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalPrior {
    /// Full Schur-complement information.
    #[default]
    Dense,
    /// Marginal variances only.
    Diagonal,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iterations: 10,
            lambda_init: 1e-4,
            lambda_scale: 10.0,
            convergence_tol: 1e-8,
            window_size: 20,
            keyframe_period: 0.25,
            marginal: MarginalPrior::Dense,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let ok = self.max_iterations > 0
            && self.lambda_init > 0.0
            && self.lambda_scale > 1.0
            && self.convergence_tol > 0.0
            && self.window_size > 1
            && self.keyframe_period > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EstimatorError::Config(
                "solver parameters must be positive (lambda_scale > 1, window_size > 1)".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    Radar(PreintegratedRadar),
    Leg(PreintegratedLeg),
    /// Random walk of the radar bias; variance of the change.
    RadarBiasWalk(f64),
    /// Random walk of the leg bias; variance of the change per world axis.
    LegBiasWalk(Vec3),
    /// Heading change between keyframes from the attitude provider.
    YawDelta {
        delta: f64,
        var: f64,
    },
    /// Prior on one state; `sqrt_info` is square with `sqrt_infoᵀ sqrt_info`
    /// the information matrix.
    /// Whitened residual `sqrt_info (x ⊟ mean) + offset`.
    Prior {
        mean: NavState,
        sqrt_info: DMatrix<f64>,
        offset: StateVec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorTag {
    Radar,
    Leg,
    RadarBiasWalk,
    LegBiasWalk,
    YawDelta,
    Prior,
}

#[derive(Debug, Clone)]
pub struct Factor {
    /// Keyframe ids; equal for unary factors.
    pub i: usize,
    pub j: usize,
    pub kind: FactorKind,
    whiten: DMatrix<f64>,
    rows: Vec<usize>,
    /// Leading whitened rows under the robust kernel.
    robust_rows: usize,
}

impl Factor {
    pub fn new(i: usize, j: usize, kind: FactorKind) -> Result<Self, EstimatorError> {
        let (rows, whiten, robust_rows) = match &kind {
            FactorKind::Radar(pre) => {
                let rows = pre.active_rows();
                let cov =
                    DMatrix::from_fn(rows.len(), rows.len(), |a, b| pre.cov[(rows[a], rows[b])]);
                let robust = rows.iter().filter(|&&r| r < 6).count();
                (rows, whitening(&cov)?, robust)
            }
            FactorKind::Leg(pre) => {
                let cov = DMatrix::from_fn(3, 3, |a, b| pre.cov[(a, b)]);
                ((0..3).collect(), whitening(&cov)?, 0)
            }
            FactorKind::RadarBiasWalk(var) => ((0..3).collect(), scalar_whitening(3, *var)?, 0),
            FactorKind::LegBiasWalk(var) => {
                let mut w = DMatrix::zeros(3, 3);
                for k in 0..3 {
                    w[(k, k)] = scalar_whitening(1, var[k])?[(0, 0)];
                }
                ((0..3).collect(), w, 0)
            }
            FactorKind::YawDelta { var, .. } => (vec![0], scalar_whitening(1, *var)?, 0),
            FactorKind::Prior { sqrt_info, .. } => {
                if sqrt_info.shape() != (STATE_DIM, STATE_DIM) {
                    return Err(EstimatorError::NumericalFailure);
                }
                ((0..STATE_DIM).collect(), sqrt_info.clone(), 0)
            }
        };
        Ok(Factor {
            i,
            j,
            kind,
            whiten,
            rows,
            robust_rows,
        })
    }

    pub fn tag(&self) -> FactorTag {
        match self.kind {
            FactorKind::Radar(_) => FactorTag::Radar,
            FactorKind::Leg(_) => FactorTag::Leg,
            FactorKind::RadarBiasWalk(_) => FactorTag::RadarBiasWalk,
            FactorKind::LegBiasWalk(_) => FactorTag::LegBiasWalk,
            FactorKind::YawDelta { .. } => FactorTag::YawDelta,
            FactorKind::Prior { .. } => FactorTag::Prior,
        }
    }

    pub fn is_unary(&self) -> bool {
        self.i == self.j
    }

    /// Unwhitened residual and Jacobians for states i and j.
    fn evaluate(&self, si: &NavState, sj: &NavState) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.rows.len();
        let mut ji = DMatrix::zeros(n, STATE_DIM);
        let mut jj = DMatrix::zeros(n, STATE_DIM);
        let mut r = DVector::zeros(n);
        match &self.kind {
            FactorKind::Radar(pre) => {
                let full = radar_residual(si, sj, pre).to_vector();
                let jac = radar_jacobians(si, sj, pre);
                for (a, &row) in self.rows.iter().enumerate() {
                    r[a] = full[row];
                    ji.row_mut(a).copy_from(&jac.d_state_i.row(row));
                    jj.row_mut(a).copy_from(&jac.d_state_j.row(row));
                }
            }
            FactorKind::Leg(pre) => {
                let res = leg_residual(si, sj, pre);
                let (a, b) = leg_jacobians(pre);
                r.copy_from(&res);
                ji.copy_from(&a);
                jj.copy_from(&b);
            }
            FactorKind::RadarBiasWalk(_) => walk(&mut r, &mut ji, &mut jj, si, sj, IDX_BR),
            FactorKind::LegBiasWalk(_) => walk(&mut r, &mut ji, &mut jj, si, sj, IDX_BL),
            FactorKind::YawDelta { delta, .. } => {
                r[0] = normalize_angle(sj.yaw - si.yaw - delta);
                ji[(0, IDX_YAW)] = -1.0;
                jj[(0, IDX_YAW)] = 1.0;
            }
            FactorKind::Prior { mean, .. } => {
                r.copy_from(&si.boxminus(mean));
                ji.fill_with_identity();
            }
        }
        (r, ji, jj)
    }

    /// Raw residual at the given states.
    pub fn residual(&self, si: &NavState, sj: &NavState) -> DVector<f64> {
        self.evaluate(si, sj).0
    }

    /// Whitened, robustly reweighted residual and Jacobians, plus the cost.
    fn linearize(
        &self,
        si: &NavState,
        sj: &NavState,
        cauchy: Option<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, f64) {
        let (r, ji, jj) = self.evaluate(si, sj);
        let mut rw = &self.whiten * r;
        if let FactorKind::Prior { offset, .. } = &self.kind {
            rw += DVector::from_column_slice(offset.as_slice());
        }
        let mut jiw = &self.whiten * ji;
        let mut jjw = &self.whiten * jj;
        let m = self.robust_rows;
        let mut cost = 0.5 * rw.rows(m, rw.len() - m).norm_squared();
        let s = rw.rows(0, m).norm_squared();
        match cauchy {
            Some(c) if m > 0 => {
                let c2 = c * c;
                cost += 0.5 * c2 * (s / c2).ln_1p();
                let w = (1.0 / (1.0 + s / c2)).sqrt();
                rw.rows_mut(0, m).scale_mut(w);
                jiw.rows_mut(0, m).scale_mut(w);
                jjw.rows_mut(0, m).scale_mut(w);
            }
            _ => cost += 0.5 * s,
        }
        (rw, jiw, jjw, cost)
    }
}

fn walk(
    r: &mut DVector<f64>,
    ji: &mut DMatrix<f64>,
    jj: &mut DMatrix<f64>,
    si: &NavState,
    sj: &NavState,
    idx: usize,
) {
    let (bi, bj) = if idx == IDX_BR {
        (si.b_r, sj.b_r)
    } else {
        (si.b_l, sj.b_l)
    };
    r.copy_from(&(bj - bi));
    for k in 0..3 {
        ji[(k, idx + k)] = -1.0;
        jj[(k, idx + k)] = 1.0;
    }
}

fn whitening(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimatorError> {
    let chol = cov.clone().cholesky().ok_or_else(|| {
        EstimatorError::Config("factor covariance is not positive definite".into())
    })?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or(EstimatorError::NumericalFailure)?;
    Ok(l_inv)
}

fn scalar_whitening(n: usize, var: f64) -> Result<DMatrix<f64>, EstimatorError> {
    if !(var > 0.0) {
        return Err(EstimatorError::Config(format!(
            "non-positive variance {var}"
        )));
    }
    Ok(DMatrix::identity(n, n) / var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    /// Cost before the first iteration and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub final_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    params: SolverParams,
    cauchy: Option<f64>,
    first_id: usize,
    states: Vec<NavState>,
    factors: Vec<Factor>,
}

impl SlidingWindow {
    /// `cauchy` is the robust-kernel scale for radar rows, in whitened units.
    pub fn new(params: SolverParams, cauchy: Option<f64>) -> Self {
        SlidingWindow {
            params,
            cauchy,
            first_id: 0,
            states: Vec::new(),
            factors: Vec::new(),
        }
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first_id(&self) -> usize {
        self.first_id
    }

    pub fn last_id(&self) -> Option<usize> {
        (!self.states.is_empty()).then(|| self.first_id + self.states.len() - 1)
    }

    pub fn state(&self, id: usize) -> Option<&NavState> {
        id.checked_sub(self.first_id)
            .and_then(|k| self.states.get(k))
    }

    pub fn states(&self) -> impl Iterator<Item = &NavState> {
        self.states.iter()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn set_state(&mut self, id: usize, s: NavState) -> Result<(), EstimatorError> {
        let k = id
            .checked_sub(self.first_id)
            .filter(|&k| k < self.states.len())
            .ok_or(EstimatorError::UnknownState(id))?;
        self.states[k] = s;
        Ok(())
    }

    /// Appends a state and returns its keyframe id.
    pub fn push_state(&mut self, s: NavState) -> Result<usize, EstimatorError> {
        if let Some(last) = self.states.last() {
            if !(s.timestamp > last.timestamp) {
                return Err(EstimatorError::NonMonotoneTime {
                    t: s.timestamp,
                    last: last.timestamp,
                });
            }
        }
        self.states.push(s);
        Ok(self.first_id + self.states.len() - 1)
    }

    /// Adds a factor between live states. A new prior replaces the old one.
    pub fn add_factor(
        &mut self,
        i: usize,
        j: usize,
        kind: FactorKind,
    ) -> Result<(), EstimatorError> {
        for id in [i, j] {
            if self.state(id).is_none() {
                return Err(EstimatorError::UnknownState(id));
            }
        }
        let f = Factor::new(i, j, kind)?;
        if f.tag() == FactorTag::Prior {
            self.factors.retain(|g| g.tag() != FactorTag::Prior);
        }
        self.factors.push(f);
        Ok(())
    }

    fn endpoints<'a>(&self, states: &'a [NavState], f: &Factor) -> (&'a NavState, &'a NavState) {
        (&states[f.i - self.first_id], &states[f.j - self.first_id])
    }

    fn total_cost(&self, states: &[NavState]) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let (si, sj) = self.endpoints(states, f);
                f.linearize(si, sj, self.cauchy).3
            })
            .sum()
    }

    pub fn cost(&self) -> f64 {
        self.total_cost(&self.states)
    }

    /// Raw residual of every factor at the current states.
    pub fn residuals(&self) -> Vec<(FactorTag, DVector<f64>)> {
        let states = &self.states;
        self.factors
            .iter()
            .map(|f| {
                let (si, sj) = self.endpoints(states, f);
                (f.tag(), f.residual(si, sj))
            })
            .collect()
    }

    fn normal_equations(&self, states: &[NavState]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = STATE_DIM * states.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut cost = 0.0;
        let mut v_seen = vec![false; states.len()];
        for f in &self.factors {
            let (si, sj) = self.endpoints(states, f);
            let (r, ji, jj, c) = f.linearize(si, sj, self.cauchy);
            cost += c;
            let a = STATE_DIM * (f.i - self.first_id);
            let b = STATE_DIM * (f.j - self.first_id);
            let jit = ji.transpose();
            add_block(&mut h, a, a, &(&jit * &ji));
            add_vec(&mut g, a, &(&jit * &r));
            if !f.is_unary() {
                let jjt = jj.transpose();
                let cross = &jit * &jj;
                add_block(&mut h, a, b, &cross);
                add_block(&mut h, b, a, &cross.transpose());
                add_block(&mut h, b, b, &(&jjt * &jj));
                add_vec(&mut g, b, &(&jjt * &r));
            }
            for (k, jac) in [(f.i, &ji), (f.j, &jj)] {
                if jac.columns(IDX_V, 3).iter().any(|&x| x != 0.0) {
                    v_seen[k - self.first_id] = true;
                }
            }
        }
        for (k, seen) in v_seen.iter().enumerate() {
            if !seen {
                for d in 0..3 {
                    let idx = STATE_DIM * k + IDX_V + d;
                    h[(idx, idx)] += GAUGE_INFO;
                }
            }
        }
        (h, g, cost)
    }

    /// Levenberg-Marquardt over all states in the window.
    pub fn optimize(&mut self) -> Result<OptimizeReport, EstimatorError> {
        if self.states.is_empty() {
            return Err(EstimatorError::EmptyWindow);
        }
        let mut states: Vec<NavState> = self.states.to_vec();
        let mut lambda = self.params.lambda_init;
        let mut trace = vec![self.total_cost(&states)];
        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.params.max_iterations {
            let (h, g, cost) = self.normal_equations(&states);
            if cost < COST_FLOOR {
                converged = true;
                break;
            }
            let mut accepted = None;
            let mut factorized = false;
            while lambda <= LAMBDA_MAX {
                let mut hd = h.clone();
                for k in 0..hd.nrows() {
                    hd[(k, k)] += lambda * h[(k, k)].max(DIAG_FLOOR);
                }
                let Some(chol) = hd.cholesky() else {
                    lambda *= self.params.lambda_scale;
                    continue;
                };
                factorized = true;
                let dx = chol.solve(&(-&g));
                let trial: Vec<NavState> = states
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        s.boxplus(&StateVec::from_column_slice(
                            &dx.as_slice()[STATE_DIM * k..STATE_DIM * (k + 1)],
                        ))
                    })
                    .collect();
                let new_cost = self.total_cost(&trial);
                if new_cost < cost {
                    accepted = Some((trial, new_cost, dx.amax()));
                    lambda = (lambda / self.params.lambda_scale).max(1e-12);
                    break;
                }
                lambda *= self.params.lambda_scale;
            }
            iterations += 1;
            let Some((trial, new_cost, step)) = accepted else {
                if !factorized {
                    return Err(EstimatorError::NumericalFailure);
                }
                // no step lowers the cost at this precision
                converged = true;
                break;
            };
            states = trial;
            trace.push(new_cost);
            if (cost - new_cost) / cost < self.params.convergence_tol || step < 1e-12 {
                converged = true;
                break;
            }
        }
        for (dst, src) in self.states.iter_mut().zip(&states) {
            *dst = *src;
        }
        let final_cost = *trace.last().expect("trace starts non-empty");
        Ok(OptimizeReport {
            iterations,
            cost_trace: trace,
            converged,
            final_cost,
        })
    }

    /// Drops the oldest state once the window exceeds its size. The dropped
    /// factors are summarized as a prior on the new oldest state. Factors
    /// reaching past that state are discarded, not summarized.
    pub fn slide(&mut self) -> Result<Option<NavState>, EstimatorError> {
        if self.states.len() <= self.params.window_size {
            return Ok(None);
        }
        let old = self.first_id;
        let next = old + 1;
        let states: Vec<NavState> = self.states.iter().take(2).copied().collect();
        let mut h = DMatrix::<f64>::zeros(2 * STATE_DIM, 2 * STATE_DIM);
        let mut g = DVector::<f64>::zeros(2 * STATE_DIM);
        for f in self.factors.iter().filter(|f| f.i == old || f.j == old) {
            if f.i.max(f.j) > next {
                continue;
            }
            let (si, sj) = (&states[f.i - old], &states[f.j - old]);
            let (r, ji, jj, _) = f.linearize(si, sj, self.cauchy);
            let a = STATE_DIM * (f.i - old);
            let b = STATE_DIM * (f.j - old);
            add_block(&mut h, a, a, &(ji.transpose() * &ji));
            add_vec(&mut g, a, &(ji.transpose() * &r));
            if !f.is_unary() {
                let cross = ji.transpose() * &jj;
                add_block(&mut h, a, b, &cross);
                add_block(&mut h, b, a, &cross.transpose());
                add_block(&mut h, b, b, &(jj.transpose() * &jj));
                add_vec(&mut g, b, &(jj.transpose() * &r));
            }
        }
        let eps = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM) * DIAG_FLOOR;
        let h_oo = h.view((0, 0), (STATE_DIM, STATE_DIM)) + &eps;
        let h_on = h.view((0, STATE_DIM), (STATE_DIM, STATE_DIM)).into_owned();
        let h_nn = h
            .view((STATE_DIM, STATE_DIM), (STATE_DIM, STATE_DIM))
            .into_owned();
        let h_oo_inv = h_oo.try_inverse().ok_or(EstimatorError::NumericalFailure)?;
        let reduce = h_on.transpose() * &h_oo_inv;
        let schur = h_nn - &reduce * h_on + eps;
        let grad = g.rows(STATE_DIM, STATE_DIM) - &reduce * g.rows(0, STATE_DIM);
        // Whitened offset e with sqrt_infoᵀ e equal to the reduced gradient.
        let (sqrt_info, offset) = match self.params.marginal {
            MarginalPrior::Dense => {
                let l = schur
                    .cholesky()
                    .ok_or(EstimatorError::NumericalFailure)?
                    .l();
                let e = l
                    .solve_lower_triangular(&grad)
                    .ok_or(EstimatorError::NumericalFailure)?;
                (l.transpose(), e)
            }
            MarginalPrior::Diagonal => {
                let cov = schur
                    .clone()
                    .try_inverse()
                    .ok_or(EstimatorError::NumericalFailure)?;
                let w = DMatrix::from_fn(STATE_DIM, STATE_DIM, |r, c| {
                    if r == c {
                        (1.0 / cov[(r, r)].max(f64::MIN_POSITIVE)).sqrt()
                    } else {
                        0.0
                    }
                });
                let e = &w * (&cov * &grad);
                (w, e)
            }
        };
        let offset = StateVec::from_column_slice(offset.as_slice());

        self.factors.retain(|f| f.i != old && f.j != old);
        let dropped = self.states.remove(0);
        self.first_id = next;
        let mean = self.states[0];
        self.add_factor(
            next,
            next,
            FactorKind::Prior {
                mean,
                sqrt_info,
                offset,
            },
        )?;
        Ok(Some(dropped))
    }

    /// Removes and returns all states, oldest first.
    pub fn drain(&mut self) -> Vec<NavState> {
        self.factors.clear();
        self.first_id += self.states.len();
        self.states.drain(..).collect()
    }
}

fn add_block(h: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>) {
    let mut v = h.view_mut((r, c), (m.nrows(), m.ncols()));
    v += m;
}

fn add_vec(g: &mut DVector<f64>, r: usize, m: &DVector<f64>) {
    let mut v = g.rows_mut(r, m.len());
    v += m;
}
