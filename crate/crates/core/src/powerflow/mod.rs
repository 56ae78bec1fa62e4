//! AC power flow: the explicit voltage-to-power map, its Jacobian, the
//! Newton-Raphson forward solve, and merit-order dispatch.
//!
//! Sign convention: injections are positive into the grid, loads are
//! negative injections.

mod dispatch;
mod newton;

pub use dispatch::{dispatch, scaled_load, solve_dispatched, OperatingPoint, LOSS_MARGIN};
pub use newton::{solve_pf, PfProblem, PfSolution};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::AdmittanceMatrix;

#[derive(Debug, thiserror::Error)]
pub enum PfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular power-flow Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("infeasible dispatch: demand {demand:.4} p.u. exceeds usable capacity {capacity:.4} p.u.")]
    InfeasibleDispatch { demand: f64, capacity: f64 },
}

/// Polar voltages: magnitudes in per unit, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl VoltageState {
    pub fn flat(n: usize) -> Self {
        Self {
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.v
            .iter()
            .zip(&self.theta)
            .map(|(&v, &t)| Complex64::from_polar(v, t))
            .collect()
    }

    /// Same magnitudes, every angle offset by `shift` radians.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            v: self.v.clone(),
            theta: self.theta.iter().map(|t| t + shift).collect(),
        }
    }

    /// Restrict to the given bus positions.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            v: idx.iter().map(|&i| self.v[i]).collect(),
            theta: idx.iter().map(|&i| self.theta[i]).collect(),
        }
    }
}

/// Nodal active and reactive injections in per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PowerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            p: idx.iter().map(|&i| self.p[i]).collect(),
            q: idx.iter().map(|&i| self.q[i]).collect(),
        }
    }

    /// Largest absolute difference over both components.
    pub fn max_abs_diff(&self, other: &PowerState) -> f64 {
        self.p
            .iter()
            .zip(&other.p)
            .chain(self.q.iter().zip(&other.q))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfSolveOptions {
    /// Largest accepted |ΔP| or |ΔQ| mismatch.
    pub tol: f64,
    pub max_iter: usize,
    pub flat_start: bool,
}

impl Default for PfSolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 30,
            flat_start: true,
        }
    }
}

fn check_dims(y: &AdmittanceMatrix, state: &VoltageState) -> Result<(), PfError> {
    let n = y.dim();
    for got in [state.v.len(), state.theta.len()] {
        if got != n {
            return Err(PfError::DimensionMismatch { expected: n, got });
        }
    }
    Ok(())
}

/// Powers injected at every bus for the given voltages:
///
/// p_i = v_i Σ_j v_j (G_ij cos θ_ij + B_ij sin θ_ij)
/// q_i = v_i Σ_j v_j (G_ij sin θ_ij − B_ij cos θ_ij)
///
/// with θ_ij = θ_i − θ_j and the sum running over every column of `Y`,
/// diagonal included.
pub fn inverse_pf(y: &AdmittanceMatrix, state: &VoltageState) -> Result<PowerState, PfError> {
    check_dims(y, state)?;
    let n = y.dim();
    let mut out = PowerState::zeros(n);
    for i in 0..n {
        let (mut p, mut q) = (0.0, 0.0);
        for j in 0..n {
            let yij = y.get(i, j);
            if yij.re == 0.0 && yij.im == 0.0 {
                continue;
            }
            let (s, c) = (state.theta[i] - state.theta[j]).sin_cos();
            let vv = state.v[j];
            p += vv * (yij.re * c + yij.im * s);
            q += vv * (yij.re * s - yij.im * c);
        }
        out.p[i] = state.v[i] * p;
        out.q[i] = state.v[i] * q;
    }
    Ok(out)
}

/// Partial derivatives of [`inverse_pf`] with respect to angles and magnitudes.
#[derive(Debug, Clone)]
pub struct PfJacobian {
    pub dp_dtheta: DMatrix<f64>,
    pub dp_dv: DMatrix<f64>,
    pub dq_dtheta: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
}

pub fn pf_jacobian(y: &AdmittanceMatrix, state: &VoltageState) -> Result<PfJacobian, PfError> {
    let s = inverse_pf(y, state)?;
    let n = y.dim();
    let mut jac = PfJacobian {
        dp_dtheta: DMatrix::zeros(n, n),
        dp_dv: DMatrix::zeros(n, n),
        dq_dtheta: DMatrix::zeros(n, n),
        dq_dv: DMatrix::zeros(n, n),
    };
    let (v, th) = (&state.v, &state.theta);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (g, b) = (y.g(i, j), y.b(i, j));
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (sn, cs) = (th[i] - th[j]).sin_cos();
            let along = g * cs + b * sn;
            let across = g * sn - b * cs;
            jac.dp_dtheta[(i, j)] = v[i] * v[j] * across;
            jac.dp_dv[(i, j)] = v[i] * along;
            jac.dq_dtheta[(i, j)] = -v[i] * v[j] * along;
            jac.dq_dv[(i, j)] = v[i] * across;
        }
        let (g, b) = (y.g(i, i), y.b(i, i));
        let vi2 = v[i] * v[i];
        jac.dp_dtheta[(i, i)] = -s.q[i] - b * vi2;
        jac.dp_dv[(i, i)] = s.p[i] / v[i] + g * v[i];
        jac.dq_dtheta[(i, i)] = s.p[i] - g * vi2;
        jac.dq_dv[(i, i)] = s.q[i] / v[i] - b * v[i];
    }
    Ok(jac)
}
