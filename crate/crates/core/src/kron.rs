//! Kron reduction of the bus admittance matrix onto the observed buses.
//!
//! With buses split into observed (o) and unobserved (u) blocks, Ohm's law
//! `I = Y V` reduces to `I_r = Y_r V_o`, where
//! `Y_r = Y_oo − Y_ou Y_uu⁻¹ Y_uo` and `I_r = I_o − Y_ou Y_uu⁻¹ I_u`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{AdmittanceMatrix, Bus, BusKind, GridCase, Line};
use crate::powerflow::VoltageState;

/// Interior blocks with an estimated condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

pub const DEFAULT_THRESHOLD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum KronError {
    #[error("unobserved block is numerically singular (condition estimate {0:e})")]
    SingularInteriorBlock(f64),
    #[error("invalid observability mask: {0}")]
    InvalidMask(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Sorted, non-empty set of observed bus positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservabilityMask {
    observed: Vec<usize>,
    n: usize,
}

impl ObservabilityMask {
    pub fn new(mut observed: Vec<usize>, n: usize) -> Result<Self, KronError> {
        observed.sort_unstable();
        observed.dedup();
        if observed.is_empty() {
            return Err(KronError::InvalidMask("no observed buses".into()));
        }
        if let Some(&bad) = observed.iter().find(|&&i| i >= n) {
            return Err(KronError::InvalidMask(format!(
                "bus position {bad} out of range 0..{n}"
            )));
        }
        Ok(Self { observed, n })
    }

    pub fn full(n: usize) -> Self {
        Self {
            observed: (0..n).collect(),
            n,
        }
    }

    /// Buses hosting at least one generator.
    pub fn generators(grid: &GridCase) -> Result<Self, KronError> {
        Self::new(grid.generator_indices(), grid.n_buses())
    }

    /// Observed buses given by bus id.
    pub fn from_ids(grid: &GridCase, ids: &[usize]) -> Result<Self, KronError> {
        let idx = ids
            .iter()
            .map(|&id| {
                grid.index_of(id)
                    .ok_or_else(|| KronError::InvalidMask(format!("unknown bus id {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(idx, grid.n_buses())
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|i| self.observed.binary_search(i).is_err())
            .collect()
    }

    pub fn n_buses(&self) -> usize {
        self.n
    }

    pub fn is_full(&self) -> bool {
        self.observed.len() == self.n
    }
}

fn block(y: &DMatrix<Complex64>, rows: &[usize], cols: &[usize]) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| y[(rows[r], cols[c])])
}

fn one_norm(m: &DMatrix<Complex64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// The partitioned admittance matrix with `Y_uu` factorized.
pub struct KronBlocks {
    pub y_oo: DMatrix<Complex64>,
    pub y_ou: DMatrix<Complex64>,
    pub y_uo: DMatrix<Complex64>,
    lu: Option<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl KronBlocks {
    pub fn new(y: &AdmittanceMatrix, mask: &ObservabilityMask) -> Result<Self, KronError> {
        if y.dim() != mask.n_buses() {
            return Err(KronError::DimensionMismatch {
                expected: mask.n_buses(),
                got: y.dim(),
            });
        }
        let (o, u) = (mask.observed(), mask.unobserved());
        let m = y.matrix();
        let lu = if u.is_empty() {
            None
        } else {
            let y_uu = block(m, &u, &u);
            let lu = y_uu.clone().lu();
            let inv = lu
                .try_inverse()
                .ok_or(KronError::SingularInteriorBlock(f64::INFINITY))?;
            let cond = one_norm(&y_uu) * one_norm(&inv);
            if !(cond <= MAX_CONDITION) {
                return Err(KronError::SingularInteriorBlock(cond));
            }
            Some(lu)
        };
        Ok(Self {
            y_oo: block(m, o, o),
            y_ou: block(m, o, &u),
            y_uo: block(m, &u, o),
            lu,
        })
    }

    /// `Y_uu⁻¹ X`, via the LU factors.
    fn solve_uu(&self, rhs: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        match &self.lu {
            Some(lu) => lu.solve(rhs).expect("factor checked at construction"),
            None => rhs.clone(),
        }
    }

    pub fn reduced(&self) -> AdmittanceMatrix {
        if self.lu.is_none() {
            return AdmittanceMatrix::from_matrix(self.y_oo.clone());
        }
        let mut r = &self.y_oo - &self.y_ou * self.solve_uu(&self.y_uo);
        // The Schur complement of a symmetric matrix is symmetric; remove rounding asymmetry.
        let n = r.nrows();
        for i in 0..n {
            for j in 0..i {
                let avg = (r[(i, j)] + r[(j, i)]) * 0.5;
                r[(i, j)] = avg;
                r[(j, i)] = avg;
            }
        }
        AdmittanceMatrix::from_matrix(r)
    }

    /// `Y_ou Y_uu⁻¹ I_u`: the part of the observed currents fed from unobserved injections.
    pub fn transferred_current(&self, i_u: &[Complex64]) -> Vec<Complex64> {
        if self.lu.is_none() {
            return vec![Complex64::new(0.0, 0.0); self.y_oo.nrows()];
        }
        let rhs = DMatrix::from_column_slice(i_u.len(), 1, i_u);
        let t = &self.y_ou * self.solve_uu(&rhs);
        t.column(0).iter().copied().collect()
    }
}

pub fn kron_reduce(y: &AdmittanceMatrix, mask: &ObservabilityMask) -> Result<AdmittanceMatrix, KronError> {
    Ok(KronBlocks::new(y, mask)?.reduced())
}

/// Observed complex powers split into the reduced-network term and the term
/// carried over from unobserved injections.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSplit {
    /// `V_o ∘ (Y_r V_o)*`
    pub reduced_term: Vec<Complex64>,
    /// `V_o ∘ (Y_ou Y_uu⁻¹ I_u)*`
    pub coupling_term: Vec<Complex64>,
    /// `V_o ∘ I_o*`, computed directly.
    pub measured: Vec<Complex64>,
}

impl InjectionSplit {
    pub fn total(&self) -> Vec<Complex64> {
        self.reduced_term
            .iter()
            .zip(&self.coupling_term)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Decompose the observed powers of a full-grid state. `currents` are the
/// full nodal injection currents (normally `Y V`).
pub fn effective_injections(
    y: &AdmittanceMatrix,
    state: &VoltageState,
    currents: &[Complex64],
    mask: &ObservabilityMask,
) -> Result<InjectionSplit, KronError> {
    let n = mask.n_buses();
    for got in [state.len(), currents.len()] {
        if got != n {
            return Err(KronError::DimensionMismatch { expected: n, got });
        }
    }
    let blocks = KronBlocks::new(y, mask)?;
    let y_r = blocks.reduced();
    let v = state.phasors();
    let (o, u) = (mask.observed(), mask.unobserved());
    let v_o: Vec<Complex64> = o.iter().map(|&i| v[i]).collect();
    let i_u: Vec<Complex64> = u.iter().map(|&i| currents[i]).collect();
    let i_r = y_r.apply(&v_o);
    let carried = blocks.transferred_current(&i_u);
    Ok(InjectionSplit {
        reduced_term: v_o.iter().zip(&i_r).map(|(v, i)| v * i.conj()).collect(),
        coupling_term: v_o.iter().zip(&carried).map(|(v, i)| v * i.conj()).collect(),
        measured: o.iter().map(|&k| v[k] * currents[k].conj()).collect(),
    })
}

/// Reduced admittance matrix together with its effective-line graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    pub y_reduced: AdmittanceMatrix,
    /// Pairs `(i, j)` with `i < j`, in positions of the reduced matrix.
    pub edges: Vec<(usize, usize)>,
    pub threshold: f64,
    pub components: usize,
}

impl ReducedModel {
    pub fn is_connected(&self) -> bool {
        self.components == 1
    }

    pub fn n_nodes(&self) -> usize {
        self.y_reduced.dim()
    }
}

/// Keep the off-diagonal pairs with `|Y_ij| ≥ threshold_rel · max_{k≠l} |Y_kl|`.
pub fn extract_reduced_graph(y_reduced: &AdmittanceMatrix, threshold_rel: f64) -> ReducedModel {
    let n = y_reduced.dim();
    let largest = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| y_reduced.get(i, j).norm())
        .fold(0.0, f64::max);
    let cut = threshold_rel * largest;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let m = y_reduced.get(i, j).norm();
            if m > 0.0 && m >= cut {
                edges.push((i, j));
            }
        }
    }
    let components = count_components(n, &edges);
    if components > 1 {
        log::warn!("reduced graph at threshold {threshold_rel} has {components} components");
    }
    ReducedModel {
        y_reduced: y_reduced.clone(),
        edges,
        threshold: threshold_rel,
        components,
    }
}

fn count_components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut components = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components
}

/// Express a reduced model in the native grid schema: one line per effective
/// edge, everything else (including dropped sub-threshold couplings) folded
/// into bus shunts so that diagonal entries are preserved.
pub fn reduced_grid(grid: &GridCase, mask: &ObservabilityMask, model: &ReducedModel) -> GridCase {
    let y = &model.y_reduced;
    let o = mask.observed();
    let slack_local = o
        .iter()
        .position(|&i| grid.buses[i].kind == BusKind::Slack)
        .unwrap_or(0);
    let mut buses: Vec<Bus> = o
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let src = &grid.buses[i];
            Bus {
                id: src.id,
                kind: if k == slack_local {
                    BusKind::Slack
                } else if src.kind == BusKind::Slack {
                    BusKind::Pv
                } else {
                    src.kind
                },
                shunt_g: 0.0,
                shunt_b: 0.0,
                base_load_p: src.base_load_p,
                base_load_q: src.base_load_q,
            }
        })
        .collect();
    let mut lines = Vec::with_capacity(model.edges.len());
    let mut edge_sum = vec![Complex64::new(0.0, 0.0); o.len()];
    for &(i, j) in &model.edges {
        let y_line = -y.get(i, j);
        let z = 1.0 / y_line;
        edge_sum[i] += y_line;
        edge_sum[j] += y_line;
        lines.push(Line {
            from: buses[i].id,
            to: buses[j].id,
            r: z.re,
            x: z.im,
            y_sh: 0.0,
        });
    }
    for (k, bus) in buses.iter_mut().enumerate() {
        let shunt = y.get(k, k) - edge_sum[k];
        bus.shunt_g = shunt.re;
        bus.shunt_b = shunt.im;
    }
    let ids: Vec<usize> = buses.iter().map(|b| b.id).collect();
    GridCase {
        base_mva: grid.base_mva,
        buses,
        lines,
        generators: grid
            .generators
            .iter()
            .filter(|g| ids.contains(&g.bus))
            .cloned()
            .collect(),
        reduced: true,
        threshold: Some(model.threshold),
    }
}

/// Solve `Y V = I` for the full grid; used by the identity checks.
pub fn solve_voltages(y: &AdmittanceMatrix, currents: &[Complex64]) -> Option<Vec<Complex64>> {
    let rhs = DVector::from_column_slice(currents);
    let v = y.matrix().clone().lu().solve(&rhs)?;
    Some(v.iter().copied().collect())
}
