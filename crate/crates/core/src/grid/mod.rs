//! Grid description: buses, Pi-model lines, generators, and the bus
//! admittance matrix built from them.

mod admittance;
mod io;
mod matpower;

pub use admittance::{assemble_admittance, line_admittance, series_admittance, AdmittanceMatrix};
pub use io::{export_grid, grid_hash, load_grid};
pub use matpower::import_matpower;

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Smallest accepted |z|² = r² + x² for a line, in per unit.
pub const MIN_IMPEDANCE_SQ: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("degenerate line impedance: r^2 + x^2 = {0:e} is below {MIN_IMPEDANCE_SQ:e}")]
    DegenerateImpedance(f64),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("invalid grid at `{path}`: {message}")]
    Validation { path: String, message: String },
}

impl GridError {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        GridError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// A network node. Loads are given as positive consumption, in per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub base_load_p: f64,
    pub base_load_q: f64,
}

/// Pi-model line. `y_sh` is the total charging susceptance, split half per end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub y_sh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: f64,
    pub v_set: f64,
}

/// A complete static grid. Lines and generators refer to buses by `Bus::id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    /// Set on Kron-reduced equivalents.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reduced: bool,
    /// Relative edge threshold used when the reduced graph was extracted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Map from bus id to position in `buses`.
    pub fn index_map(&self) -> HashMap<usize, usize> {
        self.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Line endpoints as bus positions.
    pub fn line_indices(&self) -> Vec<(usize, usize)> {
        let map = self.index_map();
        self.lines.iter().map(|l| (map[&l.from], map[&l.to])).collect()
    }

    /// Generator bus positions.
    pub fn generator_indices(&self) -> Vec<usize> {
        let map = self.index_map();
        self.generators.iter().map(|g| map[&g.bus]).collect()
    }

    /// Check every structural invariant, reporting the first violation with a field path.
    pub fn validate(&self) -> Result<(), GridError> {
        if self.buses.is_empty() {
            return Err(GridError::validation("buses", "bus list is empty"));
        }
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return Err(GridError::validation("base_mva", "must be positive and finite"));
        }
        let mut map = HashMap::new();
        for (k, bus) in self.buses.iter().enumerate() {
            if map.insert(bus.id, k).is_some() {
                return Err(GridError::validation(
                    format!("buses[{k}].id"),
                    format!("duplicate bus id {}", bus.id),
                ));
            }
            for (name, v) in [
                ("shunt_g", bus.shunt_g),
                ("shunt_b", bus.shunt_b),
                ("base_load_p", bus.base_load_p),
                ("base_load_q", bus.base_load_q),
            ] {
                if !v.is_finite() {
                    return Err(GridError::validation(format!("buses[{k}].{name}"), "not finite"));
                }
            }
        }
        let slacks = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slacks != 1 {
            return Err(GridError::validation(
                "buses",
                format!("expected exactly one slack bus, found {slacks}"),
            ));
        }

        let mut pairs = std::collections::HashSet::new();
        for (k, line) in self.lines.iter().enumerate() {
            for (name, id) in [("from", line.from), ("to", line.to)] {
                if !map.contains_key(&id) {
                    return Err(GridError::validation(
                        format!("lines[{k}].{name}"),
                        format!("unknown bus id {id}"),
                    ));
                }
            }
            if line.from == line.to {
                return Err(GridError::validation(
                    format!("lines[{k}]"),
                    "line connects a bus to itself",
                ));
            }
            if !(line.r.is_finite() && line.x.is_finite() && line.y_sh.is_finite()) {
                return Err(GridError::validation(
                    format!("lines[{k}]"),
                    "non-finite line parameter",
                ));
            }
            if line.r * line.r + line.x * line.x <= 0.0 {
                return Err(GridError::validation(format!("lines[{k}]"), "zero series impedance"));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !pairs.insert(key) {
                return Err(GridError::validation(
                    format!("lines[{k}]"),
                    "parallel line; merge before loading",
                ));
            }
        }

        for (k, g) in self.generators.iter().enumerate() {
            if !map.contains_key(&g.bus) {
                return Err(GridError::validation(
                    format!("generators[{k}].bus"),
                    format!("unknown bus id {}", g.bus),
                ));
            }
            if !(g.p_min <= g.p_max) {
                return Err(GridError::validation(format!("generators[{k}]"), "p_min > p_max"));
            }
            if !(g.q_min <= g.q_max) {
                return Err(GridError::validation(format!("generators[{k}]"), "q_min > q_max"));
            }
        }

        if !self.is_connected() {
            return Err(GridError::validation("lines", "grid graph is not connected"));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.buses.len();
        let map = self.index_map();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let (a, b) = (map[&l.from], map[&l.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
