//! Reverse-mode differentiation, neural layers and the Adam optimizer.

mod adam;
mod nn;
mod tape;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use nn::{Activation, DenseLayer, GraphMaskedLayer, GraphNet, GraphNetCache, Mlp, MlpCache};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFiniteValue { op: &'static str, node: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown parameter section `{0}`")]
    UnknownSection(String),
}

/// One named slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSection {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter array with a named-section index. This is the checkpoint
/// format and the layout the optimizer sees.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub sections: Vec<ParamSection>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_section(&mut self, name: impl Into<String>, values: &[f64]) {
        self.sections.push(ParamSection {
            name: name.into(),
            offset: self.values.len(),
            len: values.len(),
        });
        self.values.extend_from_slice(values);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn find(&self, name: &str) -> Result<&ParamSection, DiffError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| DiffError::UnknownSection(name.to_string()))
    }

    pub fn section(&self, name: &str) -> Result<&[f64], DiffError> {
        let s = self.find(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn section_mut(&mut self, name: &str) -> Result<&mut [f64], DiffError> {
        let s = self.find(name)?.clone();
        Ok(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>, DiffError> {
        let s = self.find(name)?;
        Ok(s.offset..s.offset + s.len)
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
