use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::diffkit::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pgnn,
    Vanilla,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pgnn" | "power-gnn" | "powergnn" => Ok(ModelKind::Pgnn),
            "vanilla" | "nn" => Ok(ModelKind::Vanilla),
            other => Err(format!("unknown model `{other}` (expected pgnn or vanilla)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Pgnn => "pgnn",
            ModelKind::Vanilla => "vanilla",
        })
    }
}

/// Initial physical parameters, shared by every line and node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitValues {
    pub r: f64,
    pub x: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

impl Default for InitValues {
    fn default() -> Self {
        Self {
            r: 1.0,
            x: 1.0,
            shunt_g: 1.0,
            shunt_b: 1.0,
        }
    }
}

/// Shape of the graph-masked correction network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Hidden units per observed node.
    pub width: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 8,
            hidden: 3,
            activation: Activation::SoftSign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// When set, the learning rate decays geometrically to this value at the
    /// last epoch.
    pub lr_final: Option<f64>,
    pub epochs: usize,
    /// Weight of the squared-norm penalty on the network parameters.
    pub reg_coeff: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub init: InitValues,
    pub seed: u64,
    /// Power-GNN correction network; `None` freezes it at zero.
    pub net: Option<NetConfig>,
    /// Vanilla network: number of hidden layers.
    pub hidden_layers: usize,
    /// Vanilla network: units per hidden layer, `None` for twice the bus count.
    pub units: Option<usize>,
    /// Vanilla network hidden activation.
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_final: None,
            epochs: 1000,
            reg_coeff: 0.0,
            batch_size: None,
            init: InitValues::default(),
            seed: 0,
            net: Some(NetConfig::default()),
            hidden_layers: 3,
            units: None,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    /// Long-run hyperparameters for the closest (model, size, observability)
    /// cell. `n_buses` selects the small- or large-system cell and
    /// `n_observed` converts a total unit count to a per-node width.
    pub fn full_scale_defaults(model: ModelKind, n_buses: usize, full: bool, n_observed: usize) -> Self {
        let base = Self::default();
        let large = n_buses > 60;
        match model {
            ModelKind::Vanilla => Self {
                lr: 2e-5,
                epochs: 800_000,
                net: None,
                hidden_layers: 3,
                units: if large { None } else { Some(28) },
                activation: Activation::Relu,
                ..base
            },
            ModelKind::Pgnn if full && !large => Self {
                lr: 2e-4,
                epochs: 30_000,
                init: InitValues::default(),
                ..base
            },
            ModelKind::Pgnn if full => Self {
                lr: 5e-4,
                epochs: 50_000,
                init: InitValues {
                    r: 1e-2,
                    x: 1e-1,
                    shunt_b: 1e-1,
                    shunt_g: 1e-1,
                },
                ..base
            },
            ModelKind::Pgnn => Self {
                lr: 2e-5,
                epochs: 20_000,
                init: InitValues {
                    r: 1e-1,
                    x: 6e-1,
                    shunt_b: 1e-2,
                    shunt_g: 1e-1,
                },
                net: Some(NetConfig {
                    width: (400 / n_observed.max(1)).max(1),
                    hidden: 3,
                    activation: Activation::SoftSign,
                }),
                ..base
            },
        }
    }

    /// Settings sized for a single-core run of a few minutes.
    pub fn desk_defaults(model: ModelKind, full: bool) -> Self {
        let base = Self::default();
        match model {
            ModelKind::Vanilla => Self {
                lr: 2e-3,
                lr_final: Some(1e-5),
                epochs: 16_000,
                net: None,
                activation: Activation::Relu,
                ..base
            },
            ModelKind::Pgnn if full => Self {
                lr: 2e-2,
                lr_final: Some(1e-4),
                epochs: 15_000,
                net: Some(NetConfig {
                    width: 2,
                    hidden: 1,
                    activation: Activation::SoftSign,
                }),
                ..base
            },
            ModelKind::Pgnn => Self {
                lr: 1e-2,
                lr_final: Some(1e-4),
                epochs: 20_000,
                init: InitValues {
                    r: 1e-1,
                    x: 6e-1,
                    shunt_b: 1e-2,
                    shunt_g: 1e-1,
                },
                net: Some(NetConfig::default()),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: String| Err(EstimatorError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("lr_final must be positive, got {f}"));
            }
        }
        if !(self.reg_coeff >= 0.0 && self.reg_coeff.is_finite()) {
            return bad(format!("reg_coeff must be non-negative, got {}", self.reg_coeff));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(n) = &self.net {
            if n.width == 0 {
                return bad("correction net width must be at least 1".into());
            }
        }
        if self.units == Some(0) {
            return bad("units must be at least 1".into());
        }
        let i = &self.init;
        if !(i.r * i.r + i.x * i.x >= super::MIN_IMPEDANCE_SQ) {
            return bad(format!("initial impedance ({}, {}) is degenerate", i.r, i.x));
        }
        Ok(())
    }

    /// Learning rate used at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(f) if self.epochs > 1 => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.lr * (f / self.lr).powf(t)
            }
            _ => self.lr,
        }
    }
}
