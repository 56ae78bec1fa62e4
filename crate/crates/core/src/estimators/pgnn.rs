//! Power-GNN: the inverse power-flow map with learnable line impedances and
//! node shunts, plus a graph-masked correction for the unobserved part.
//!
//! For an effective line `e = {i, j}` with series admittance `g + jb` the
//! injection at `i` picks up `g (v_i² − c_ij) − b s_ij` (active) and
//! `−g s_ij − b (v_i² − c_ij)` (reactive), where
//! `c_ij + j s_ij = v_i v_j e^{j(θ_i − θ_j)}`. These coefficients depend on
//! the data only, so they are computed once per dataset.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Checkpoint, EstimatorError, InitValues, InjectionModel, LossRecord, ModelKind, NetConfig, Observations, Prediction,
    TrainConfig, TrainReport, DIVERGENCE_FACTOR, LOSS_FLOOR, MIN_IMPEDANCE_SQ,
};
use crate::diffkit::{adam_step, AdamState, GraphNet, GraphNetCache, ParamVector, Tape};
use crate::grid::{AdmittanceMatrix, GridCase};
use crate::kron::{extract_reduced_graph, ReducedModel};
use num_complex::Complex64;

/// Edge features per node: summed `cos θ_ij`, `sin θ_ij` and `v_i v_j`.
pub const EDGE_FEATURES: usize = 3;

/// Undirected graph over the observed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Edges are normalized to `i < j`, sorted and deduplicated.
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, EstimatorError> {
        let mut norm = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b || a >= n_nodes || b >= n_nodes {
                return Err(EstimatorError::InvalidConfig(format!(
                    "edge ({a}, {b}) is invalid for {n_nodes} nodes"
                )));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        let mut neighbors = vec![Vec::new(); n_nodes];
        for &(i, j) in &norm {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self {
            n_nodes,
            edges: norm,
            neighbors,
        })
    }

    /// The lines of a fully observed grid.
    pub fn from_grid(grid: &GridCase) -> Self {
        Self::new(grid.n_buses(), grid.line_indices()).expect("validated grid has valid lines")
    }

    pub fn from_reduced(model: &ReducedModel) -> Self {
        Self::new(model.n_nodes(), model.edges.clone()).expect("reduced graph edges are valid")
    }

    pub fn complete(n_nodes: usize) -> Self {
        let edges = (0..n_nodes)
            .flat_map(|i| (i + 1..n_nodes).map(move |j| (i, j)))
            .collect();
        Self::new(n_nodes, edges).expect("complete graph is valid")
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }
}

/// Learnable physical parameters: series impedance per effective line and
/// shunt admittance per observed node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub r: Vec<f64>,
    pub x: Vec<f64>,
    pub shunt_g: Vec<f64>,
    pub shunt_b: Vec<f64>,
}

impl PhysParams {
    pub fn uniform(topo: &Topology, init: &InitValues) -> Self {
        let (m, n) = (topo.edges.len(), topo.n_nodes);
        Self {
            n_nodes: n,
            edges: topo.edges.clone(),
            r: vec![init.r; m],
            x: vec![init.x; m],
            shunt_g: vec![init.shunt_g; n],
            shunt_b: vec![init.shunt_b; n],
        }
    }

    /// Parameters reproducing `y` on the given edges: line admittance
    /// `−Y_ij`, shunt equal to the row sum. Couplings outside the edge set
    /// are dropped.
    pub fn from_admittance(y: &AdmittanceMatrix, topo: &Topology) -> Result<Self, EstimatorError> {
        if y.dim() != topo.n_nodes {
            return Err(EstimatorError::DimensionMismatch {
                what: "admittance matrix",
                expected: topo.n_nodes,
                got: y.dim(),
            });
        }
        let mut p = Self::uniform(topo, &InitValues::default());
        for (k, &(i, j)) in topo.edges.iter().enumerate() {
            let z = Complex64::new(1.0, 0.0) / -y.get(i, j);
            p.r[k] = z.re;
            p.x[k] = z.im;
        }
        for i in 0..topo.n_nodes {
            let s = y.row_sum(i);
            p.shunt_g[i] = s.re;
            p.shunt_b[i] = s.im;
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        2 * self.edges.len() + 2 * self.n_nodes
    }

    /// Series conductance and susceptance of line `k`.
    #[inline]
    pub fn series(&self, k: usize) -> (f64, f64) {
        let (r, x) = (self.r[k], self.x[k]);
        let den = r * r + x * x;
        (r / den, -x / den)
    }

    pub fn admittance(&self) -> AdmittanceMatrix {
        let mut y = AdmittanceMatrix::zeros(self.n_nodes);
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            let (g, b) = self.series(k);
            y.stamp_series(i, j, Complex64::new(g, b));
        }
        for i in 0..self.n_nodes {
            y.stamp_shunt(i, Complex64::new(self.shunt_g[i], self.shunt_b[i]));
        }
        y
    }
}

/// Graph-masked correction `Σ_φ` producing `(Δp, Δq)` per observed node.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionNet {
    pub config: NetConfig,
    pub net: GraphNet,
}

impl CorrectionNet {
    pub fn new(topo: &Topology, config: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let net = GraphNet::new(
            &topo.neighbors,
            1,
            EDGE_FEATURES,
            config.width,
            config.hidden,
            2,
            config.activation,
            rng,
        );
        Self { config, net }
    }

    fn rewire(&mut self, topo: &Topology) {
        for l in &mut self.net.layers {
            l.neighbors = topo.neighbors.clone();
        }
    }
}

/// Dataset prepared for repeated Power-GNN evaluations on a fixed topology.
#[derive(Debug, Clone)]
pub struct PgnnData {
    n_nodes: usize,
    n_samples: usize,
    edges: Vec<(usize, usize)>,
    /// Per sample and edge: `v_i² − c_ij`, `v_j² − c_ij`, `s_ij`.
    coef: Vec<[f64; 3]>,
    v2: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    node_features: DMatrix<f64>,
    edge_features: DMatrix<f64>,
}

impl PgnnData {
    pub fn new(topo: &Topology, obs: &Observations) -> Result<Self, EstimatorError> {
        obs.check()?;
        if obs.n_nodes != topo.n_nodes {
            return Err(EstimatorError::DimensionMismatch {
                what: "observed nodes",
                expected: topo.n_nodes,
                got: obs.n_nodes,
            });
        }
        let n = topo.n_nodes;
        let ns = obs.n_samples();
        let m = topo.edges.len();
        let mut coef = Vec::with_capacity(ns * m);
        let mut edge_features = DMatrix::zeros(EDGE_FEATURES, ns * n);
        for s in 0..ns {
            let v = &obs.v[s * n..(s + 1) * n];
            let t = &obs.theta[s * n..(s + 1) * n];
            for &(i, j) in &topo.edges {
                let (sin, cos) = (t[i] - t[j]).sin_cos();
                let vv = v[i] * v[j];
                let c = vv * cos;
                let sij = vv * sin;
                coef.push([v[i] * v[i] - c, v[j] * v[j] - c, sij]);
                for (node, sgn) in [(i, 1.0), (j, -1.0)] {
                    let col = s * n + node;
                    edge_features[(0, col)] += cos;
                    edge_features[(1, col)] += sgn * sin;
                    edge_features[(2, col)] += vv;
                }
            }
        }
        Ok(Self {
            n_nodes: n,
            n_samples: ns,
            edges: topo.edges.clone(),
            coef,
            v2: obs.v.iter().map(|v| v * v).collect(),
            p: obs.p.clone(),
            q: obs.q.clone(),
            node_features: DMatrix::from_row_slice(1, ns * n, &obs.v),
            edge_features,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn subset(&self, samples: &[usize]) -> Self {
        let (n, m) = (self.n_nodes, self.edges.len());
        let nodes = |x: &[f64]| -> Vec<f64> {
            samples
                .iter()
                .flat_map(|&s| x[s * n..(s + 1) * n].iter().copied())
                .collect()
        };
        let cols: Vec<usize> = samples.iter().flat_map(|&s| s * n..(s + 1) * n).collect();
        Self {
            n_nodes: n,
            n_samples: samples.len(),
            edges: self.edges.clone(),
            coef: samples
                .iter()
                .flat_map(|&s| self.coef[s * m..(s + 1) * m].iter().copied())
                .collect(),
            v2: nodes(&self.v2),
            p: nodes(&self.p),
            q: nodes(&self.q),
            node_features: self.node_features.select_columns(&cols),
            edge_features: self.edge_features.select_columns(&cols),
        }
    }

    /// Injections of the physical part alone.
    fn physics(&self, phys: &PhysParams) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n_nodes, self.edges.len());
        let gb: Vec<(f64, f64)> = (0..m).map(|k| phys.series(k)).collect();
        let mut p = vec![0.0; self.v2.len()];
        let mut q = vec![0.0; self.v2.len()];
        for s in 0..self.n_samples {
            let base = s * n;
            for i in 0..n {
                p[base + i] = phys.shunt_g[i] * self.v2[base + i];
                q[base + i] = -phys.shunt_b[i] * self.v2[base + i];
            }
            for (k, &(i, j)) in self.edges.iter().enumerate() {
                let [di, dj, sij] = self.coef[s * m + k];
                let (g, b) = gb[k];
                p[base + i] += g * di - b * sij;
                q[base + i] += -g * sij - b * di;
                p[base + j] += g * dj + b * sij;
                q[base + j] += g * sij - b * dj;
            }
        }
        (p, q)
    }
}

/// Physical parameters plus an optional correction network.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerGnn {
    pub topology: Topology,
    pub phys: PhysParams,
    pub net: Option<CorrectionNet>,
}

const SECTIONS: [&str; 4] = ["r", "x", "shunt_g", "shunt_b"];

impl PowerGnn {
    pub fn new(topo: &Topology, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            topology: topo.clone(),
            phys: PhysParams::uniform(topo, &config.init),
            net: config.net.map(|c| CorrectionNet::new(topo, c, &mut rng)),
        }
    }

    /// A model with the given physical parameters and no correction.
    pub fn physical(phys: PhysParams) -> Result<Self, EstimatorError> {
        let topology = Topology::new(phys.n_nodes, phys.edges.clone())?;
        if topology.edges != phys.edges || phys.r.len() != phys.edges.len() {
            return Err(EstimatorError::InvalidConfig(
                "physical parameters do not match their edge list".into(),
            ));
        }
        Ok(Self {
            topology,
            phys,
            net: None,
        })
    }

    pub fn params(&self) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push_section("r", &self.phys.r);
        pv.push_section("x", &self.phys.x);
        pv.push_section("shunt_g", &self.phys.shunt_g);
        pv.push_section("shunt_b", &self.phys.shunt_b);
        if let Some(c) = &self.net {
            pv.push_section("phi", &c.net.params());
        }
        pv
    }

    pub fn n_params(&self) -> usize {
        self.phys.n_params() + self.net.as_ref().map_or(0, |c| c.net.n_params())
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), EstimatorError> {
        if values.len() != self.n_params() {
            return Err(EstimatorError::DimensionMismatch {
                what: "power-gnn parameters",
                expected: self.n_params(),
                got: values.len(),
            });
        }
        let (m, n) = (self.phys.edges.len(), self.phys.n_nodes);
        let mut k = 0;
        for (dst, len) in [
            (&mut self.phys.r, m),
            (&mut self.phys.x, m),
            (&mut self.phys.shunt_g, n),
            (&mut self.phys.shunt_b, n),
        ] {
            dst.copy_from_slice(&values[k..k + len]);
            k += len;
        }
        if let Some(c) = &mut self.net {
            c.net.set_params(&values[k..])?;
        }
        Ok(())
    }

    pub fn from_params(topo: &Topology, net: Option<&NetConfig>, params: &ParamVector) -> Result<Self, EstimatorError> {
        let config = TrainConfig {
            net: net.copied(),
            ..TrainConfig::default()
        };
        let mut model = Self::new(topo, &config);
        let mut values = Vec::with_capacity(model.n_params());
        for name in SECTIONS.iter().chain(net.map(|_| &"phi")) {
            let s = params
                .section(name)
                .map_err(|e| EstimatorError::Checkpoint(e.to_string()))?;
            values.extend_from_slice(s);
        }
        model
            .set_params(&values)
            .map_err(|e| EstimatorError::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    /// Learned reduced admittance matrix.
    pub fn admittance(&self) -> AdmittanceMatrix {
        self.phys.admittance()
    }

    pub fn checkpoint(&self, observed: Vec<usize>, n_buses: usize) -> Checkpoint {
        Checkpoint::Pgnn {
            observed,
            n_buses,
            edges: self.topology.edges.clone(),
            net: self.net.as_ref().map(|c| c.config),
            params: self.params(),
        }
    }

    fn forward(&self, data: &PgnnData) -> Result<(Vec<f64>, Vec<f64>, Option<GraphNetCache>), EstimatorError> {
        let (mut p, mut q) = data.physics(&self.phys);
        let cache = match &self.net {
            Some(c) => {
                let cache = c.net.forward_cached(&data.node_features, &data.edge_features)?;
                for (k, col) in cache.output.column_iter().enumerate() {
                    p[k] += col[0];
                    q[k] += col[1];
                }
                Some(cache)
            }
            None => None,
        };
        Ok((p, q, cache))
    }

    /// Project each line back to `r² + x² ≥ MIN_IMPEDANCE_SQ`.
    fn clamp_impedance(values: &mut [f64], m: usize) {
        let floor = MIN_IMPEDANCE_SQ.sqrt();
        for k in 0..m {
            let (r, x) = (values[k], values[m + k]);
            let norm = (r * r + x * x).sqrt();
            if norm * norm < MIN_IMPEDANCE_SQ {
                if norm == 0.0 {
                    values[m + k] = floor;
                } else {
                    values[k] = r / norm * floor;
                    values[m + k] = x / norm * floor;
                }
            }
        }
    }
}

impl InjectionModel for PowerGnn {
    fn n_nodes(&self) -> usize {
        self.topology.n_nodes
    }

    fn predict(&self, obs: &Observations) -> Result<Prediction, EstimatorError> {
        let data = PgnnData::new(&self.topology, obs)?;
        let (p, q, _) = self.forward(&data)?;
        Ok(Prediction { p, q })
    }
}

/// Loss `(1/(N·n)) Σ ‖S − Ŝ‖² + α‖φ‖²` and its gradient in the layout of
/// [`PowerGnn::params`].
pub fn pgnn_loss(model: &PowerGnn, data: &PgnnData, reg_coeff: f64) -> Result<(LossRecord, Vec<f64>), EstimatorError> {
    if data.n_samples == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    if data.edges != model.phys.edges || data.n_nodes != model.phys.n_nodes {
        return Err(EstimatorError::InvalidConfig(
            "dataset prepared for a different topology".into(),
        ));
    }
    let (n, m) = (data.n_nodes, data.edges.len());
    let norm = 1.0 / (data.n_samples * n) as f64;
    let (p_hat, q_hat, cache) = model.forward(data)?;

    let mut data_term = 0.0;
    let mut adj = DMatrix::zeros(2, p_hat.len());
    for k in 0..p_hat.len() {
        let rp = data.p[k] - p_hat[k];
        let rq = data.q[k] - q_hat[k];
        data_term += rp * rp + rq * rq;
        adj[(0, k)] = -2.0 * norm * rp;
        adj[(1, k)] = -2.0 * norm * rq;
    }
    data_term *= norm;

    let mut grad = vec![0.0; model.n_params()];
    let (gr, rest) = grad.split_at_mut(m);
    let (gx, rest) = rest.split_at_mut(m);
    let (g_sg, rest) = rest.split_at_mut(n);
    let (g_sb, g_phi) = rest.split_at_mut(n);

    let mut dg = vec![0.0; m];
    let mut db = vec![0.0; m];
    for s in 0..data.n_samples {
        let base = s * n;
        for i in 0..n {
            let v2 = data.v2[base + i];
            g_sg[i] += adj[(0, base + i)] * v2;
            g_sb[i] -= adj[(1, base + i)] * v2;
        }
        for (k, &(i, j)) in data.edges.iter().enumerate() {
            let [di, dj, sij] = data.coef[s * m + k];
            let (api, aqi) = (adj[(0, base + i)], adj[(1, base + i)]);
            let (apj, aqj) = (adj[(0, base + j)], adj[(1, base + j)]);
            dg[k] += api * di - aqi * sij + apj * dj + aqj * sij;
            db[k] += -api * sij - aqi * di + apj * sij - aqj * dj;
        }
    }

    // (r, x) → (g, b) on the tape
    let mut tape = Tape::with_capacity(8, 12);
    for k in 0..m {
        tape.clear();
        let r = tape.var(model.phys.r[k]);
        let x = tape.var(model.phys.x[k]);
        let r2 = tape.sqr(r);
        let x2 = tape.sqr(x);
        let den = tape.add(r2, x2);
        let g = tape.div(r, den);
        let nx = tape.neg(x);
        let b = tape.div(nx, den);
        let adjoints = tape.backward_with(&[(g, dg[k]), (b, db[k])])?;
        gr[k] = adjoints.wrt(r);
        gx[k] = adjoints.wrt(x);
    }

    let mut reg_term = 0.0;
    if let (Some(c), Some(cache)) = (&model.net, &cache) {
        let g = c.net.backward(cache, &data.edge_features, &adj)?;
        let phi = c.net.params();
        for ((dst, gk), w) in g_phi.iter_mut().zip(&g).zip(&phi) {
            *dst = gk + 2.0 * reg_coeff * w;
            reg_term += w * w;
        }
        reg_term *= reg_coeff;
    }
    let rec = LossRecord {
        epoch: 0,
        loss: data_term + reg_term,
        data_term,
        reg_term,
    };
    Ok((rec, grad))
}

fn optimize(
    model: &mut PowerGnn,
    data: &PgnnData,
    config: &TrainConfig,
    epochs: std::ops::Range<usize>,
    rng: &mut ChaCha8Rng,
    trace: &mut Vec<LossRecord>,
    adam: &mut AdamState,
    initial: &mut Option<f64>,
) -> Result<(), EstimatorError> {
    let m = model.phys.edges.len();
    let mut theta = model.params().values;
    let mut order: Vec<usize> = (0..data.n_samples).collect();
    for epoch in epochs {
        adam.lr = config.lr_at(epoch);
        let batches: Vec<Vec<usize>> = match config.batch_size {
            Some(b) if b < data.n_samples => {
                order.shuffle(rng);
                order.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![],
        };
        let mut rec = LossRecord {
            epoch,
            loss: 0.0,
            data_term: 0.0,
            reg_term: 0.0,
        };
        let mut step = |batch: &PgnnData, weight: f64, rec: &mut LossRecord| -> Result<(), EstimatorError> {
            let (r, grad) = pgnn_loss(model, batch, config.reg_coeff)?;
            rec.loss += weight * r.loss;
            rec.data_term += weight * r.data_term;
            rec.reg_term += weight * r.reg_term;
            adam_step(adam, &mut theta, &grad);
            PowerGnn::clamp_impedance(&mut theta, m);
            model.set_params(&theta)
        };
        if batches.is_empty() {
            step(data, 1.0, &mut rec)?;
        } else {
            let w = 1.0 / batches.len() as f64;
            for b in &batches {
                step(&data.subset(b), w, &mut rec)?;
            }
        }
        let first = *initial.get_or_insert(rec.loss);
        if !rec.loss.is_finite() || rec.loss > DIVERGENCE_FACTOR * first.max(LOSS_FLOOR) {
            return Err(EstimatorError::Divergence { epoch, loss: rec.loss });
        }
        trace.push(rec);
    }
    Ok(())
}

fn final_record(
    model: &PowerGnn,
    data: &PgnnData,
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossRecord, EstimatorError> {
    let (mut rec, _) = pgnn_loss(model, data, config.reg_coeff)?;
    rec.epoch = epoch;
    if !rec.loss.is_finite() {
        return Err(EstimatorError::Divergence { epoch, loss: rec.loss });
    }
    Ok(rec)
}

/// Full-batch (by default) Adam over the physical parameters and `φ`.
pub fn train_pgnn(
    topo: &Topology,
    train: &Observations,
    config: &TrainConfig,
) -> Result<(PowerGnn, TrainReport), EstimatorError> {
    config.validate()?;
    let data = PgnnData::new(topo, train)?;
    let mut model = PowerGnn::new(topo, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(model.n_params(), config.lr);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut initial = None;
    optimize(
        &mut model,
        &data,
        config,
        0..config.epochs,
        &mut rng,
        &mut trace,
        &mut adam,
        &mut initial,
    )?;
    let final_loss = final_record(&model, &data, config, config.epochs)?;
    log::info!("pgnn: {} epochs, final loss {:.3e}", config.epochs, final_loss.loss);
    Ok((
        model,
        TrainReport {
            model: ModelKind::Pgnn,
            epochs: config.epochs,
            trace,
            final_loss,
            success: None,
            config: config.clone(),
        },
    ))
}

/// Training without a reference topology: start from the complete graph over
/// the observed nodes, prune lines below `threshold_rel` of the largest
/// learned coupling after `warmup` epochs, then continue on the pruned graph.
pub fn train_pgnn_pruned(
    train: &Observations,
    config: &TrainConfig,
    warmup: usize,
    threshold_rel: f64,
) -> Result<(PowerGnn, TrainReport), EstimatorError> {
    config.validate()?;
    let warmup = warmup.min(config.epochs);
    let full = Topology::complete(train.n_nodes);
    let data = PgnnData::new(&full, train)?;
    let mut model = PowerGnn::new(&full, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(model.n_params(), config.lr);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut initial = None;
    optimize(
        &mut model,
        &data,
        config,
        0..warmup,
        &mut rng,
        &mut trace,
        &mut adam,
        &mut initial,
    )?;

    let reduced = extract_reduced_graph(&model.admittance(), threshold_rel);
    let topo = Topology::from_reduced(&reduced);
    log::info!(
        "pruned {} of {} candidate lines",
        full.edges.len() - topo.edges.len(),
        full.edges.len()
    );
    let mut phys = PhysParams::uniform(&topo, &config.init);
    for (k, e) in topo.edges.iter().enumerate() {
        let old = full
            .edges
            .binary_search(e)
            .expect("pruned edge comes from the complete graph");
        phys.r[k] = model.phys.r[old];
        phys.x[k] = model.phys.x[old];
    }
    phys.shunt_g = model.phys.shunt_g.clone();
    phys.shunt_b = model.phys.shunt_b.clone();
    let mut net = model.net.take();
    if let Some(c) = &mut net {
        c.rewire(&topo);
    }
    let mut model = PowerGnn {
        topology: topo.clone(),
        phys,
        net,
    };
    let data = PgnnData::new(&topo, train)?;
    let mut adam = AdamState::new(model.n_params(), config.lr);
    optimize(
        &mut model,
        &data,
        config,
        warmup..config.epochs,
        &mut rng,
        &mut trace,
        &mut adam,
        &mut initial,
    )?;
    let final_loss = final_record(&model, &data, config, config.epochs)?;
    Ok((
        model,
        TrainReport {
            model: ModelKind::Pgnn,
            epochs: config.epochs,
            trace,
            final_loss,
            success: None,
            config: config.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CaseId, ScenarioConfig};
    use crate::diffkit::{central_difference, relative_error};
    use crate::grid::{assemble_admittance, import_matpower};
    use crate::kron::ObservabilityMask;
    use crate::powerflow::{inverse_pf, VoltageState};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn two_bus_obs(theta2: f64) -> Observations {
        // line x = 0.1 between two unit-magnitude buses
        let s = theta2.sin() * 10.0;
        let c = (1.0 - theta2.cos()) * 10.0;
        Observations {
            n_nodes: 2,
            v: vec![1.0, 1.0],
            theta: vec![0.0, theta2],
            p: vec![-s, s],
            q: vec![c, c],
        }
    }

    fn two_bus(x: f64) -> PowerGnn {
        let topo = Topology::new(2, vec![(0, 1)]).unwrap();
        let mut phys = PhysParams::uniform(&topo, &InitValues::default());
        phys.r = vec![0.0];
        phys.x = vec![x];
        phys.shunt_g = vec![0.0; 2];
        phys.shunt_b = vec![0.0; 2];
        PowerGnn::physical(phys).unwrap()
    }

    #[test]
    fn true_line_gives_zero_loss() {
        let obs = two_bus_obs(-0.1);
        let model = two_bus(0.1);
        let data = PgnnData::new(&model.topology, &obs).unwrap();
        let (rec, _) = pgnn_loss(&model, &data, 0.0).unwrap();
        assert!(rec.loss < 1e-28, "{}", rec.loss);
        assert_relative_eq!(obs.p[0], 0.9983341664682815, max_relative = 1e-15);
    }

    #[test]
    fn susceptance_offset_matches_hand_value() {
        let delta = 0.3;
        let obs = two_bus_obs(-0.1);
        // b = −1/x, so x = 1/(10 − δ) moves b from −10 to −10 + δ
        let model = two_bus(1.0 / (10.0 - delta));
        let data = PgnnData::new(&model.topology, &obs).unwrap();
        let (rec, _) = pgnn_loss(&model, &data, 0.0).unwrap();
        let expected = delta * delta * 2.0 * (1.0 - 0.1f64.cos());
        assert_relative_eq!(rec.loss, expected, max_relative = 1e-10);
    }

    fn case14_full(n: usize, case: CaseId) -> (GridCase, Observations) {
        let grid = import_matpower(crate::CASE14).unwrap();
        let cfg = ScenarioConfig {
            n_samples: n,
            ..ScenarioConfig::new(case, 3)
        };
        let set = generate(&grid, &cfg).unwrap();
        let obs = Observations::from_set(&set, &ObservabilityMask::full(grid.n_buses()));
        (grid, obs)
    }

    #[test]
    fn true_grid_parameters_explain_generated_data() {
        let (grid, obs) = case14_full(20, CaseId::C1);
        let topo = Topology::from_grid(&grid);
        let y = assemble_admittance(&grid).unwrap();
        let phys = PhysParams::from_admittance(&y, &topo).unwrap();
        let back = phys.admittance();
        assert!((back.matrix() - y.matrix()).norm() < 1e-10);
        let model = PowerGnn::physical(phys).unwrap();
        let data = PgnnData::new(&topo, &obs).unwrap();
        let (rec, _) = pgnn_loss(&model, &data, 0.0).unwrap();
        assert!(rec.data_term < 1e-14, "{}", rec.data_term);
    }

    fn random_model(seed: u64, n: usize, edges: Vec<(usize, usize)>) -> PowerGnn {
        let topo = Topology::new(n, edges).unwrap();
        let config = TrainConfig {
            seed,
            net: Some(NetConfig {
                width: 3,
                hidden: 2,
                activation: crate::diffkit::Activation::SoftSign,
            }),
            ..TrainConfig::default()
        };
        let mut model = PowerGnn::new(&topo, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = model.params().values;
        let m = topo.edges.len();
        for (k, t) in theta.iter_mut().enumerate() {
            *t = if k < m {
                rng.gen_range(0.01..0.2)
            } else if k < 2 * m {
                rng.gen_range(0.05..0.5)
            } else {
                rng.gen_range(-0.3..0.3)
            };
        }
        model.set_params(&theta).unwrap();
        model
    }

    fn random_obs(seed: u64, n: usize, samples: usize) -> Observations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n * samples;
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..k).map(|_| rng.gen_range(lo..hi)).collect() };
        Observations {
            n_nodes: n,
            v: draw(0.9, 1.1),
            theta: draw(-0.3, 0.3),
            p: draw(-1.0, 1.0),
            q: draw(-0.5, 0.5),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let edges = vec![(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)];
        for seed in 0..3 {
            let model = random_model(seed, 4, edges.clone());
            let obs = random_obs(seed + 10, 4, 5);
            let data = PgnnData::new(&model.topology, &obs).unwrap();
            let (_, grad) = pgnn_loss(&model, &data, 0.01).unwrap();
            let mut probe = model.clone();
            let fd = central_difference(
                |t| {
                    probe.set_params(t).unwrap();
                    pgnn_loss(&probe, &data, 0.01).unwrap().0.loss
                },
                &model.params().values,
                1e-5,
            );
            let err = relative_error(&grad, &fd);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn doubling_regularization_adds_penalty_once() {
        let model = random_model(4, 3, vec![(0, 1), (1, 2)]);
        let data = PgnnData::new(&model.topology, &random_obs(1, 3, 4)).unwrap();
        let a = 0.05;
        let l1 = pgnn_loss(&model, &data, a).unwrap().0;
        let l2 = pgnn_loss(&model, &data, 2.0 * a).unwrap().0;
        let phi = model
            .params()
            .section("phi")
            .unwrap()
            .iter()
            .map(|w| w * w)
            .sum::<f64>();
        assert!(phi > 0.0);
        assert_relative_eq!(l2.loss - l1.loss, a * phi, max_relative = 1e-12);
        assert_eq!(l1.data_term, l2.data_term);
    }

    #[test]
    fn prediction_is_phase_invariant() {
        let model = random_model(7, 4, vec![(0, 1), (1, 2), (2, 3)]);
        let obs = random_obs(2, 4, 6);
        let a = model.predict(&obs).unwrap();
        let b = model.predict(&obs.phase_shifted(20f64.to_radians())).unwrap();
        for (x, y) in a.p.iter().chain(&a.q).zip(b.p.iter().chain(&b.q)) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn physical_part_is_inverse_power_flow() {
        let mut model = random_model(9, 4, vec![(0, 1), (1, 2), (2, 3), (0, 2)]);
        model.net = None;
        let obs = random_obs(5, 4, 3);
        let pred = model.predict(&obs).unwrap();
        let y = model.admittance();
        for s in 0..3 {
            let state = VoltageState {
                v: obs.v[s * 4..s * 4 + 4].to_vec(),
                theta: obs.theta[s * 4..s * 4 + 4].to_vec(),
            };
            let pf = inverse_pf(&y, &state).unwrap();
            for i in 0..4 {
                assert!((pf.p[i] - pred.p[s * 4 + i]).abs() < 1e-12);
                assert!((pf.q[i] - pred.q[s * 4 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let obs = random_obs(3, 3, 4);
        let topo = Topology::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (model, report) = train_pgnn(&topo, &obs, &config).unwrap();
        assert_eq!(model, PowerGnn::new(&topo, &config));
        assert!(report.trace.is_empty());
    }

    #[test]
    fn diverging_run_is_reported() {
        let obs = random_obs(3, 3, 4);
        let topo = Topology::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let config = TrainConfig {
            lr: 1e6,
            epochs: 50,
            init: InitValues {
                r: 0.01,
                x: 0.01,
                ..InitValues::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_pgnn(&topo, &obs, &config),
            Err(EstimatorError::Divergence { .. })
        ));
    }

    #[test]
    fn minibatches_reduce_loss_deterministically() {
        let (grid, obs) = case14_full(24, CaseId::C1);
        let topo = Topology::from_grid(&grid);
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 40,
            batch_size: Some(8),
            net: None,
            ..TrainConfig::default()
        };
        let (a, ra) = train_pgnn(&topo, &obs, &config).unwrap();
        let (b, _) = train_pgnn(&topo, &obs, &config).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss.loss < ra.trace[0].loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = random_model(2, 3, vec![(0, 1), (0, 2)]);
        let ck = model.checkpoint(vec![0, 3, 4], 6);
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        match back.load().unwrap() {
            super::super::LoadedModel::Pgnn(m) => assert_eq!(m, model),
            _ => panic!("wrong model kind"),
        }
    }
}
