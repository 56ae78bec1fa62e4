//! The two trainable injection estimators: Power-GNN (learnable admittances
//! plus a graph-masked correction) and a fully connected baseline.

mod config;
mod pgnn;
mod vanilla;

use serde::{Deserialize, Serialize};

use crate::datagen::SampleSet;
use crate::diffkit::{DiffError, ParamVector};
use crate::kron::ObservabilityMask;

pub use config::{InitValues, ModelKind, NetConfig, TrainConfig};
pub use pgnn::{
    pgnn_loss, train_pgnn, train_pgnn_pruned, CorrectionNet, PgnnData, PhysParams, PowerGnn, Topology, EDGE_FEATURES,
};
pub use vanilla::{train_vanilla, vanilla_loss, Scaler, VanillaNet, SUCCESS_LOSS};

/// Smallest allowed `r² + x²` for a learned line.
pub const MIN_IMPEDANCE_SQ: f64 = crate::grid::MIN_IMPEDANCE_SQ;

/// Training stops when the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Initial losses below this are treated as this value in the divergence test.
pub const LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimatorError {
    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Voltages and injections at the observed buses, sample-major
/// (`value[s * n_nodes + i]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub n_nodes: usize,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Observations {
    pub fn from_set(set: &SampleSet, mask: &ObservabilityMask) -> Self {
        let idx = mask.observed();
        let n = idx.len();
        let cap = n * set.len();
        let mut obs = Observations {
            n_nodes: n,
            v: Vec::with_capacity(cap),
            theta: Vec::with_capacity(cap),
            p: Vec::with_capacity(cap),
            q: Vec::with_capacity(cap),
        };
        for s in &set.samples {
            for &k in idx {
                obs.v.push(s.state.v[k]);
                obs.theta.push(s.state.theta[k]);
                obs.p.push(s.power.p[k]);
                obs.q.push(s.power.q[k]);
            }
        }
        obs
    }

    pub fn n_samples(&self) -> usize {
        if self.n_nodes == 0 {
            0
        } else {
            self.v.len() / self.n_nodes
        }
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn subset(&self, samples: &[usize]) -> Self {
        let n = self.n_nodes;
        let pick = |x: &[f64]| {
            samples
                .iter()
                .flat_map(|&s| x[s * n..(s + 1) * n].iter().copied())
                .collect()
        };
        Observations {
            n_nodes: n,
            v: pick(&self.v),
            theta: pick(&self.theta),
            p: pick(&self.p),
            q: pick(&self.q),
        }
    }

    /// The same observations with every angle shifted by `shift` radians.
    pub fn phase_shifted(&self, shift: f64) -> Self {
        Observations {
            theta: self.theta.iter().map(|t| t + shift).collect(),
            ..self.clone()
        }
    }

    fn check(&self) -> Result<(), EstimatorError> {
        let len = self.v.len();
        for got in [self.theta.len(), self.p.len(), self.q.len()] {
            if got != len {
                return Err(EstimatorError::DimensionMismatch {
                    what: "observation arrays",
                    expected: len,
                    got,
                });
            }
        }
        if self.n_nodes == 0 || len == 0 {
            return Err(EstimatorError::EmptyBatch);
        }
        if len % self.n_nodes != 0 {
            return Err(EstimatorError::DimensionMismatch {
                what: "observation arrays",
                expected: self.n_nodes * (len / self.n_nodes + 1),
                got: len,
            });
        }
        Ok(())
    }
}

/// Predicted active and reactive injections, laid out like [`Observations`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Anything that maps observed voltages to observed injections.
pub trait InjectionModel {
    fn n_nodes(&self) -> usize;

    /// Uses only `v` and `theta` of the observations.
    fn predict(&self, obs: &Observations) -> Result<Prediction, EstimatorError>;
}

/// `S_o` estimate from either model.
pub fn predict_injections(model: &dyn InjectionModel, obs: &Observations) -> Result<Prediction, EstimatorError> {
    if obs.n_nodes != model.n_nodes() {
        return Err(EstimatorError::DimensionMismatch {
            what: "observed nodes",
            expected: model.n_nodes(),
            got: obs.n_nodes,
        });
    }
    model.predict(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub epochs: usize,
    /// Loss before each optimizer step.
    pub trace: Vec<LossRecord>,
    /// Loss of the returned parameters.
    pub final_loss: LossRecord,
    /// Vanilla only: whether the training loss reached [`SUCCESS_LOSS`].
    pub success: Option<bool>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,loss,data_term,reg_term\n");
        for r in self.trace.iter().chain(std::iter::once(&self.final_loss)) {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.epoch, r.loss, r.data_term, r.reg_term
            ));
        }
        out
    }
}

/// Serialized model: architecture plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Checkpoint {
    Pgnn {
        /// Observed bus positions in the full grid.
        observed: Vec<usize>,
        n_buses: usize,
        edges: Vec<(usize, usize)>,
        net: Option<NetConfig>,
        params: ParamVector,
    },
    Vanilla {
        observed: Vec<usize>,
        n_buses: usize,
        widths: Vec<usize>,
        activation: crate::diffkit::Activation,
        scaler: Scaler,
        params: ParamVector,
    },
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Pgnn(PowerGnn),
    Vanilla(VanillaNet),
}

impl LoadedModel {
    pub fn as_model(&self) -> &dyn InjectionModel {
        match self {
            LoadedModel::Pgnn(m) => m,
            LoadedModel::Vanilla(m) => m,
        }
    }
}

impl Checkpoint {
    pub fn observed(&self) -> &[usize] {
        match self {
            Checkpoint::Pgnn { observed, .. } | Checkpoint::Vanilla { observed, .. } => observed,
        }
    }

    pub fn n_buses(&self) -> usize {
        match self {
            Checkpoint::Pgnn { n_buses, .. } | Checkpoint::Vanilla { n_buses, .. } => *n_buses,
        }
    }

    pub fn mask(&self) -> Result<ObservabilityMask, EstimatorError> {
        ObservabilityMask::new(self.observed().to_vec(), self.n_buses())
            .map_err(|e| EstimatorError::Checkpoint(e.to_string()))
    }

    pub fn load(&self) -> Result<LoadedModel, EstimatorError> {
        match self {
            Checkpoint::Pgnn {
                observed,
                edges,
                net,
                params,
                ..
            } => {
                let topo = Topology::new(observed.len(), edges.clone())?;
                PowerGnn::from_params(&topo, net.as_ref(), params).map(LoadedModel::Pgnn)
            }
            Checkpoint::Vanilla {
                observed,
                widths,
                activation,
                scaler,
                params,
                ..
            } => VanillaNet::from_params(observed.len(), widths, *activation, scaler.clone(), params)
                .map(LoadedModel::Vanilla),
        }
    }
}
