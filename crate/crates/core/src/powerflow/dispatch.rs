use serde::{Deserialize, Serialize};

use super::{inverse_pf, solve_pf, PfError, PfProblem, PfSolveOptions, PowerState, VoltageState};
use crate::grid::{AdmittanceMatrix, BusKind, GridCase};

/// Headroom kept above demand so the slack can absorb losses.
pub const LOSS_MARGIN: f64 = 0.05;

/// Merit-order dispatch. Every available generator starts at `p_min`, then
/// generators are raised to `p_max` in ascending cost order (ties broken by
/// index) until demand is met. Unavailable generators get 0.
///
/// `load` follows the injection sign convention, so demand is `-Σ load.p`.
pub fn dispatch(grid: &GridCase, load: &PowerState, costs: &[f64], available: &[bool]) -> Result<Vec<f64>, PfError> {
    let ng = grid.generators.len();
    for got in [costs.len(), available.len()] {
        if got != ng {
            return Err(PfError::DimensionMismatch { expected: ng, got });
        }
    }
    let demand = -load.p.iter().sum::<f64>();
    let capacity: f64 = grid
        .generators
        .iter()
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g.p_max)
        .sum();
    let floor: f64 = grid
        .generators
        .iter()
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g.p_min)
        .sum();
    if capacity < demand * (1.0 + LOSS_MARGIN) || floor > demand || (demand > 0.0 && capacity <= 0.0) {
        return Err(PfError::InfeasibleDispatch { demand, capacity });
    }

    let mut setpoints: Vec<f64> = grid
        .generators
        .iter()
        .zip(available)
        .map(|(g, &a)| if a { g.p_min } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..ng).filter(|&k| available[k]).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let mut remaining = demand - floor;
    for k in order {
        if remaining <= 0.0 {
            break;
        }
        let g = &grid.generators[k];
        let add = (g.p_max - g.p_min).min(remaining);
        setpoints[k] += add;
        remaining -= add;
    }
    Ok(setpoints)
}

/// A solved operating point: voltages plus nodal injections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub state: VoltageState,
    /// Specified injections where the solve fixed them, computed ones elsewhere
    /// (slack bus, reactive power at voltage-controlled buses).
    pub power: PowerState,
    pub kinds: Vec<BusKind>,
    pub iterations: usize,
    /// max |inverse_pf(Y, state) - power|.
    pub certificate: f64,
}

/// Dispatch the given load, then solve the AC power flow with PV→PQ switching
/// at reactive limits. The slack bus absorbs the active/reactive balance.
pub fn solve_dispatched(
    grid: &GridCase,
    y: &AdmittanceMatrix,
    load: &PowerState,
    costs: &[f64],
    available: &[bool],
    opts: &PfSolveOptions,
) -> Result<OperatingPoint, PfError> {
    let n = grid.n_buses();
    if load.len() != n {
        return Err(PfError::DimensionMismatch {
            expected: n,
            got: load.len(),
        });
    }
    let setpoints = dispatch(grid, load, costs, available)?;
    let gen_bus = grid.generator_indices();

    let mut problem = PfProblem {
        kinds: Vec::with_capacity(n),
        p: load.p.clone(),
        q: load.q.clone(),
        v: vec![1.0; n],
        slack_angle: 0.0,
    };
    let mut q_lim = vec![(0.0, 0.0); n];
    let mut controlled = vec![false; n];
    for (k, g) in grid.generators.iter().enumerate() {
        let i = gen_bus[k];
        problem.p[i] += setpoints[k];
        if available[k] {
            if !controlled[i] {
                problem.v[i] = g.v_set;
                controlled[i] = true;
            }
            q_lim[i].0 += g.q_min;
            q_lim[i].1 += g.q_max;
        }
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        problem.kinds.push(match bus.kind {
            BusKind::Slack => BusKind::Slack,
            BusKind::Pv if controlled[i] => BusKind::Pv,
            _ => BusKind::Pq,
        });
    }

    let mut sol = solve_pf(y, &problem, opts, None)?;
    let mut iterations = sol.iterations;
    // PV→PQ switching; a switched bus never switches back.
    loop {
        let s = inverse_pf(y, &sol.state)?;
        let mut switched = false;
        for i in 0..n {
            if problem.kinds[i] != BusKind::Pv {
                continue;
            }
            let q_gen = s.q[i] - load.q[i];
            let (lo, hi) = q_lim[i];
            let limit = if q_gen > hi + opts.tol {
                hi
            } else if q_gen < lo - opts.tol {
                lo
            } else {
                continue;
            };
            problem.kinds[i] = BusKind::Pq;
            problem.q[i] = limit + load.q[i];
            switched = true;
        }
        if !switched {
            break;
        }
        let warm = PfSolveOptions {
            flat_start: false,
            ..*opts
        };
        sol = solve_pf(y, &problem, &warm, Some(&sol.state))?;
        iterations += sol.iterations;
    }

    let computed = inverse_pf(y, &sol.state)?;
    let mut power = computed.clone();
    for i in 0..n {
        match problem.kinds[i] {
            BusKind::Slack => {}
            BusKind::Pv => power.p[i] = problem.p[i],
            BusKind::Pq => {
                power.p[i] = problem.p[i];
                power.q[i] = problem.q[i];
            }
        }
    }
    let certificate = computed.max_abs_diff(&power);
    Ok(OperatingPoint {
        state: sol.state,
        power,
        kinds: problem.kinds,
        iterations,
        certificate,
    })
}

/// Base-case load of a grid scaled by `lambda`, as negative injections.
pub fn scaled_load(grid: &GridCase, lambda: f64) -> PowerState {
    PowerState {
        p: grid.buses.iter().map(|b| -lambda * b.base_load_p).collect(),
        q: grid.buses.iter().map(|b| -lambda * b.base_load_q).collect(),
    }
}
