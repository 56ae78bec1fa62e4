//! Physics-informed estimation of power-grid parameters.
//!
//! The crate covers the full pipeline: grid description and admittance
//! assembly, AC power flow, Kron reduction onto observed buses, synthetic
//! operating-point datasets, a small reverse-mode differentiation kit, the
//! Power-GNN and vanilla estimators, and the evaluation metrics.

pub mod datagen;
pub mod diffkit;
pub mod estimators;
pub mod grid;
pub mod kron;
pub mod metrics;
pub mod powerflow;

/// The IEEE 14-bus test case in MATPOWER format.
pub const CASE14: &str = include_str!("../data/case14.m");
