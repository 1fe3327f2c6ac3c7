//! Centralized weighted least squares: the linearized normal equations and
//! the Gauss-Newton iteration built on them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factor_graph::DEFAULT_SLACK_VARIANCE;
use crate::gnbp::{initial_state, mad, StartMode};
use crate::measurement::{evaluate_with_jacobian, observability_rank, JacobianRow, MeasurementSet};
use crate::network::NetworkModel;
use crate::power_flow::StateVector;

/// Scaled pivots below this mark the normal matrix as singular.
const PIVOT_TOL: f64 = 1e-13;
const REFINEMENT_STEPS: usize = 3;
pub const NORMAL_RESIDUAL_TOL: f64 = 1e-10;

/// `J(x)`, `W` and `r(x)` for one linearization point. The last row is the
/// slack-angle pseudo-measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub dim: usize,
    pub rows: Vec<JacobianRow>,
    pub weights: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl LinearizedSystem {
    pub fn measurement_rows(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn dense_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.rows.len(), self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, d) in row {
                j[(i, c)] += d;
            }
        }
        j
    }

    /// `JᵀWJ`
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for (row, w) in self.rows.iter().zip(&self.weights) {
            for &(a, da) in row {
                for &(b, db) in row {
                    g[(a, b)] += w * da * db;
                }
            }
        }
        g
    }

    /// `Σ |J_i|ᵀ·w_i·(|r_i| + |J_i·dx|)`, the cancellation-free magnitude of
    /// the terms in [`Self::normal_residual`].
    pub fn normal_residual_scale(&self, dx: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for ((row, w), r) in self.rows.iter().zip(&self.weights).zip(&self.residuals) {
            let fit: f64 = row.iter().map(|&(c, d)| (d * dx[c]).abs()).sum();
            let wr = w * (r.abs() + fit);
            for &(c, d) in row {
                out[c] += d.abs() * wr;
            }
        }
        out
    }

    /// `JᵀW(r − J·dx)`
    pub fn normal_residual(&self, dx: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for ((row, w), r) in self.rows.iter().zip(&self.weights).zip(&self.residuals) {
            let fit: f64 = row.iter().map(|&(c, d)| d * dx[c]).sum();
            let wr = w * (r - fit);
            for &(c, d) in row {
                out[c] += d * wr;
            }
        }
        out
    }
}

pub fn linearize(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> LinearizedSystem {
    linearize_with(net, ms, x, DEFAULT_SLACK_VARIANCE, 0.0)
}

pub fn linearize_with(
    net: &NetworkModel,
    ms: &MeasurementSet,
    x: &StateVector,
    slack_variance: f64,
    slack_angle: f64,
) -> LinearizedSystem {
    let mut rows = Vec::with_capacity(ms.len() + 1);
    let mut weights = Vec::with_capacity(ms.len() + 1);
    let mut residuals = Vec::with_capacity(ms.len() + 1);
    for m in ms.iter() {
        let (h, row) = evaluate_with_jacobian(net, m, x);
        rows.push(row);
        weights.push(1.0 / m.variance);
        residuals.push(m.z - h);
    }
    let slack = net.angle_index(net.slack());
    rows.push(vec![(slack, 1.0)]);
    weights.push(1.0 / slack_variance);
    residuals.push(slack_angle - x.theta[net.slack()]);
    LinearizedSystem {
        dim: net.state_dim(),
        rows,
        weights,
        residuals,
    }
}

/// Cholesky factor of the Jacobi-scaled normal matrix `S·G·S`, `S = diag(G)^{-1/2}`.
pub struct NormalFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
}

impl NormalFactor {
    pub fn new(g: &DMatrix<f64>) -> Option<Self> {
        let n = g.nrows();
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = g[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut s = g.clone();
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(s)?;
        let l = chol.l_dirty();
        if (0..n).any(|i| l[(i, i)] * l[(i, i)] < PIVOT_TOL) {
            return None;
        }
        Some(NormalFactor { chol, scale })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.scale);
        self.chol.solve(&scaled).component_mul(&self.scale)
    }

    /// `G⁻¹`
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let n = self.scale.len();
        DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * self.scale[i] * self.scale[j])
    }
}

fn unobservable(sys: &LinearizedSystem) -> Error {
    let j = sys.dense_jacobian();
    let rank = crate::measurement::numerical_rank(&j);
    Error::Unobservable {
        rank,
        required: sys.dim,
    }
}

pub fn factor_normal_matrix(sys: &LinearizedSystem) -> Result<NormalFactor> {
    NormalFactor::new(&sys.normal_matrix()).ok_or_else(|| unobservable(sys))
}

/// Linear WLS increment solving `JᵀWJ·Δx = JᵀW·r`.
pub fn solve_linear_wls(sys: &LinearizedSystem) -> Result<Vec<f64>> {
    let factor = factor_normal_matrix(sys)?;
    let zero = vec![0.0; sys.dim];
    let rhs = sys.normal_residual(&zero);
    let mut dx = factor.solve(&rhs);
    let mut res = sys.normal_residual(dx.as_slice());
    for _ in 0..REFINEMENT_STEPS {
        dx += factor.solve(&res);
        res = sys.normal_residual(dx.as_slice());
    }
    let scale = sys.normal_residual_scale(dx.as_slice()).amax();
    let check = res.amax();
    if !(check <= NORMAL_RESIDUAL_TOL * scale) && scale > 0.0 {
        log::warn!("normal-equation residual {check:e} exceeds {:e}", NORMAL_RESIDUAL_TOL * scale);
        return Err(unobservable(sys));
    }
    Ok(dx.as_slice().to_vec())
}

/// Brute-force `(JᵀWJ)⁻¹JᵀWr` through an explicit inverse.
pub fn solve_linear_wls_dense(sys: &LinearizedSystem) -> Result<Vec<f64>> {
    let j = sys.dense_jacobian();
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&sys.weights));
    let r = DVector::from_column_slice(&sys.residuals);
    let g = j.transpose() * &w * &j;
    let inv = g.try_inverse().ok_or_else(|| unobservable(sys))?;
    Ok((inv * j.transpose() * w * r).as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonConfig {
    pub start: StartMode,
    pub iterations: usize,
    /// Stop once MAD(Δx) falls below this value; 0 runs every iteration.
    pub tol: f64,
    pub seed: u64,
    pub slack_variance: f64,
    pub slack_angle: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        GaussNewtonConfig {
            start: StartMode::default(),
            iterations: 12,
            tol: 1e-10,
            seed: 0,
            slack_variance: DEFAULT_SLACK_VARIANCE,
            slack_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussNewtonResult {
    pub x_hat: StateVector,
    /// `x^(0), x^(1), …` including the final estimate.
    pub trajectory: Vec<StateVector>,
    pub increments: Vec<Vec<f64>>,
    pub mad: Vec<f64>,
    pub converged: bool,
}

/// MAD values below this level are round-off and never count as growth.
const DIVERGENCE_FLOOR: f64 = 1e-9;

pub fn gauss_newton(net: &NetworkModel, ms: &MeasurementSet, cfg: &GaussNewtonConfig) -> Result<GaussNewtonResult> {
    let mut x = initial_state(net, &cfg.start, cfg.slack_angle, cfg.seed);
    let mut trajectory = vec![x.clone()];
    let mut increments = Vec::new();
    let mut mads: Vec<f64> = Vec::new();
    let mut growth = 0;
    let mut converged = false;
    for nu in 0..cfg.iterations {
        let sys = linearize_with(net, ms, &x, cfg.slack_variance, cfg.slack_angle);
        let dx = solve_linear_wls(&sys)?;
        let m = mad(&dx);
        if let Some(&prev) = mads.last() {
            if m > prev && m > DIVERGENCE_FLOOR {
                growth += 1;
            } else {
                growth = 0;
            }
        }
        if growth >= 3 || !m.is_finite() {
            return Err(Error::Diverged(nu));
        }
        x = x.add(&dx);
        trajectory.push(x.clone());
        increments.push(dx);
        mads.push(m);
        if m < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(GaussNewtonResult {
        x_hat: x,
        trajectory,
        increments,
        mad: mads,
        converged,
    })
}

/// Rank of the measurement Jacobian at `x` including the slack row.
pub fn jacobian_rank(net: &NetworkModel, ms: &MeasurementSet, x: &StateVector) -> usize {
    observability_rank(net, ms, x)
}
