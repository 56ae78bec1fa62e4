use nalgebra::{DMatrix, DVector};

use super::{inverse_pf, pf_jacobian, PfError, PfSolveOptions, VoltageState};
use crate::grid::{AdmittanceMatrix, BusKind};

/// Specified quantities per bus. `p` is used at PV and PQ buses, `q` at PQ
/// buses, `v` at PV and slack buses. The slack angle is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PfProblem {
    pub kinds: Vec<BusKind>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub slack_angle: f64,
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub state: VoltageState,
    pub iterations: usize,
    /// Final max(|ΔP|, |ΔQ|) over the specified quantities.
    pub residual: f64,
}

fn mismatch(
    y: &AdmittanceMatrix,
    problem: &PfProblem,
    state: &VoltageState,
    angle_vars: &[usize],
    mag_vars: &[usize],
) -> Result<DVector<f64>, PfError> {
    let s = inverse_pf(y, state)?;
    let mut f = DVector::zeros(angle_vars.len() + mag_vars.len());
    for (k, &i) in angle_vars.iter().enumerate() {
        f[k] = problem.p[i] - s.p[i];
    }
    for (k, &i) in mag_vars.iter().enumerate() {
        f[angle_vars.len() + k] = problem.q[i] - s.q[i];
    }
    Ok(f)
}

/// Newton-Raphson on the polar mismatch equations.
///
/// Unknowns are the angles of every non-slack bus and the magnitudes of the
/// PQ buses. `warm` is used as the starting point unless `opts.flat_start`.
pub fn solve_pf(
    y: &AdmittanceMatrix,
    problem: &PfProblem,
    opts: &PfSolveOptions,
    warm: Option<&VoltageState>,
) -> Result<PfSolution, PfError> {
    let n = y.dim();
    for got in [problem.kinds.len(), problem.p.len(), problem.q.len(), problem.v.len()] {
        if got != n {
            return Err(PfError::DimensionMismatch { expected: n, got });
        }
    }
    let angle_vars: Vec<usize> = (0..n).filter(|&i| problem.kinds[i] != BusKind::Slack).collect();
    let mag_vars: Vec<usize> = (0..n).filter(|&i| problem.kinds[i] == BusKind::Pq).collect();

    let mut state = match warm {
        Some(w) if !opts.flat_start => w.clone(),
        _ => VoltageState::flat(n),
    };
    for i in 0..n {
        match problem.kinds[i] {
            BusKind::Slack => {
                state.v[i] = problem.v[i];
                state.theta[i] = problem.slack_angle;
            }
            BusKind::Pv => state.v[i] = problem.v[i],
            BusKind::Pq => {}
        }
    }

    let na = angle_vars.len();
    let m = na + mag_vars.len();
    let mut f = mismatch(y, problem, &state, &angle_vars, &mag_vars)?;
    let mut residual = f.amax();
    let mut iterations = 0;
    while !(residual <= opts.tol) {
        if iterations >= opts.max_iter || !residual.is_finite() {
            return Err(PfError::NonConvergence { iterations, residual });
        }
        iterations += 1;
        let jac = pf_jacobian(y, &state)?;
        let mut j = DMatrix::zeros(m, m);
        for (r, &i) in angle_vars.iter().enumerate() {
            for (c, &k) in angle_vars.iter().enumerate() {
                j[(r, c)] = jac.dp_dtheta[(i, k)];
            }
            for (c, &k) in mag_vars.iter().enumerate() {
                j[(r, na + c)] = jac.dp_dv[(i, k)];
            }
        }
        for (r, &i) in mag_vars.iter().enumerate() {
            for (c, &k) in angle_vars.iter().enumerate() {
                j[(na + r, c)] = jac.dq_dtheta[(i, k)];
            }
            for (c, &k) in mag_vars.iter().enumerate() {
                j[(na + r, na + c)] = jac.dq_dv[(i, k)];
            }
        }
        let dx = j
            .lu()
            .solve(&f)
            .filter(|dx| dx.iter().all(|x| x.is_finite()))
            .ok_or(PfError::SingularJacobian(iterations))?;
        for (k, &i) in angle_vars.iter().enumerate() {
            state.theta[i] += dx[k];
        }
        for (k, &i) in mag_vars.iter().enumerate() {
            state.v[i] += dx[na + k];
        }
        if state.v.iter().any(|&v| !(v > 0.0)) {
            residual = f64::NAN;
            return Err(PfError::NonConvergence { iterations, residual });
        }
        f = mismatch(y, problem, &state, &angle_vars, &mag_vars)?;
        residual = f.amax();
    }
    Ok(PfSolution {
        state,
        iterations,
        residual,
    })
}
