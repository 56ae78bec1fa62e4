//! Evaluation: injection mismatch, admittance reconstruction error, per-line
//! comparison against a Kron reference and the regularization sweep.

mod report;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{
    predict_injections, train_pgnn, EstimatorError, InjectionModel, Observations, PhysParams, Topology, TrainConfig,
};
use crate::grid::AdmittanceMatrix;
use crate::kron::ReducedModel;

pub use report::{fig2_csv, fig2_gp, fig3_csv, fig3_gp, fig4_csv, fig4_gp, Table1};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Mean squared injection mismatch, normalized like the training data term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchResult {
    pub value: f64,
    /// Contributions of active and reactive power; they sum to `value`.
    pub p_term: f64,
    pub q_term: f64,
    /// Per observed node, averaged over samples.
    pub per_node: Vec<f64>,
    pub n_samples: usize,
    pub n_nodes: usize,
}

pub fn mismatch(model: &dyn InjectionModel, obs: &Observations) -> Result<MismatchResult, MetricsError> {
    let pred = predict_injections(model, obs)?;
    let (n, ns) = (obs.n_nodes, obs.n_samples());
    let mut per_node = vec![0.0; n];
    let (mut p_term, mut q_term) = (0.0, 0.0);
    for k in 0..obs.p.len() {
        let dp = (obs.p[k] - pred.p[k]).powi(2);
        let dq = (obs.q[k] - pred.q[k]).powi(2);
        p_term += dp;
        q_term += dq;
        per_node[k % n] += dp + dq;
    }
    let total = obs.p.len() as f64;
    per_node.iter_mut().for_each(|x| *x /= ns as f64);
    Ok(MismatchResult {
        value: (p_term + q_term) / total,
        p_term: p_term / total,
        q_term: q_term / total,
        per_node,
        n_samples: ns,
        n_nodes: n,
    })
}

/// `‖est − reference‖_F / ‖reference‖_F`.
pub fn relative_frobenius(est: &AdmittanceMatrix, reference: &AdmittanceMatrix) -> f64 {
    (est.matrix() - reference.matrix()).norm() / reference.frobenius_norm()
}

/// Abscissa used when reporting a reconstruction curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconNormalization {
    /// Number of training samples.
    #[default]
    None,
    /// Training samples per observed node.
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    pub n_samples: usize,
    /// `n_samples`, or `n_samples / n_nodes` under per-node normalization.
    pub x: f64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Realizations that trained successfully.
    pub completed: usize,
    /// Realizations lost to training failures.
    pub failures: Vec<String>,
    pub normalization: ReconNormalization,
}

impl ReconError {
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconCurveConfig {
    pub sample_counts: Vec<usize>,
    pub realizations: usize,
    pub normalization: ReconNormalization,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ReconCurveConfig {
    pub const DEFAULT_COUNTS: [usize; 6] = [10, 20, 40, 100, 200, 400];

    /// Physics-only training with a decaying step, ten realizations.
    pub fn desk(seed: u64) -> Self {
        Self {
            sample_counts: Self::DEFAULT_COUNTS.to_vec(),
            realizations: 10,
            normalization: ReconNormalization::None,
            train: TrainConfig {
                lr: 2e-2,
                lr_final: Some(1e-4),
                epochs: 40_000,
                net: None,
                seed,
                ..TrainConfig::default()
            },
            seed,
        }
    }
}

fn realization_rng(seed: u64, n: usize, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
    rng.set_stream(r as u64);
    rng
}

/// Train on `realizations` random `N`-subsets of `pool` for every `N` and
/// compare the learned admittance matrix with `reference`.
pub fn recon_error_curve(
    topo: &Topology,
    pool: &Observations,
    reference: &AdmittanceMatrix,
    config: &ReconCurveConfig,
) -> Result<Vec<ReconError>, MetricsError> {
    if config.realizations == 0 {
        return Err(MetricsError::Invalid("at least one realization is required".into()));
    }
    let available = pool.n_samples();
    if let Some(&n) = config.sample_counts.iter().find(|&&n| n == 0 || n > available) {
        return Err(MetricsError::Invalid(format!(
            "sample count {n} outside 1..={available}"
        )));
    }
    let jobs: Vec<(usize, usize)> = config
        .sample_counts
        .iter()
        .flat_map(|&n| (0..config.realizations).map(move |r| (n, r)))
        .collect();
    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let mut rng = realization_rng(config.seed, n, r);
            let mut idx = sample_indices(&mut rng, available, n).into_vec();
            idx.sort_unstable();
            let train = TrainConfig {
                seed: config.train.seed.wrapping_add(r as u64),
                ..config.train.clone()
            };
            train_pgnn(topo, &pool.subset(&idx), &train)
                .map(|(m, _)| relative_frobenius(&m.admittance(), reference))
                .map_err(|e| format!("N={n} realization {r}: {e}"))
        })
        .collect();

    let mut out = Vec::with_capacity(config.sample_counts.len());
    for (k, &n) in config.sample_counts.iter().enumerate() {
        let chunk = &results[k * config.realizations..(k + 1) * config.realizations];
        let errs: Vec<f64> = chunk.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let failures: Vec<String> = chunk.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
        for f in &failures {
            log::warn!("reconstruction run failed: {f}");
        }
        let (min, mean, max) = if errs.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                errs.iter().copied().fold(f64::INFINITY, f64::min),
                errs.iter().sum::<f64>() / errs.len() as f64,
                errs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let x = match config.normalization {
            ReconNormalization::None => n as f64,
            ReconNormalization::PerNode => n as f64 / topo.n_nodes() as f64,
        };
        out.push(ReconError {
            n_samples: n,
            x,
            min,
            mean,
            max,
            completed: errs.len(),
            failures,
            normalization: config.normalization,
        });
    }
    Ok(out)
}

/// One effective line in both the estimate and the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRow {
    pub i: usize,
    pub j: usize,
    pub g_est: f64,
    pub g_ref: f64,
    pub b_est: f64,
    pub b_ref: f64,
    /// `|Y^(r)_ij|` of the reference.
    pub y_ref_abs: f64,
}

impl LineRow {
    /// Conductance below zero or susceptance above zero.
    pub fn is_violation(&self) -> bool {
        self.g_est < 0.0 || self.b_est > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineComparison {
    pub rows: Vec<LineRow>,
    /// Learned lines that are not reference lines.
    pub only_est: Vec<(usize, usize)>,
    /// Reference lines the estimate does not contain.
    pub only_ref: Vec<(usize, usize)>,
}

fn ordered(e: (usize, usize)) -> (usize, usize) {
    (e.0.min(e.1), e.0.max(e.1))
}

/// Line-by-line comparison of learned and reference line admittances
/// (`g + ib = −Y_ij`). Rows are matched by unordered node pair.
pub fn line_param_compare(est: &PhysParams, reference: &ReducedModel) -> LineComparison {
    let ref_edges: Vec<(usize, usize)> = {
        let mut e: Vec<_> = reference.edges.iter().map(|&e| ordered(e)).collect();
        e.sort_unstable();
        e.dedup();
        e
    };
    let mut rows = Vec::new();
    let mut only_est = Vec::new();
    let mut matched = Vec::new();
    for (k, &e) in est.edges.iter().enumerate() {
        let (i, j) = ordered(e);
        if ref_edges.binary_search(&(i, j)).is_ok() {
            let (g_est, b_est) = est.series(k);
            let y = -reference.y_reduced.get(i, j);
            rows.push(LineRow {
                i,
                j,
                g_est,
                g_ref: y.re,
                b_est,
                b_ref: y.im,
                y_ref_abs: y.norm(),
            });
            matched.push((i, j));
        } else {
            only_est.push((i, j));
        }
    }
    rows.sort_by_key(|r| (r.i, r.j));
    matched.sort_unstable();
    let only_ref = ref_edges
        .into_iter()
        .filter(|e| matched.binary_search(e).is_err())
        .collect();
    LineComparison {
        rows,
        only_est,
        only_ref,
    }
}

impl LineComparison {
    pub fn violations(&self) -> Vec<&LineRow> {
        self.rows.iter().filter(|r| r.is_violation()).collect()
    }

    /// Share of matched lines with `g ≥ 0` and `b ≤ 0`.
    pub fn physical_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        1.0 - self.violations().len() as f64 / self.rows.len() as f64
    }

    /// Pearson correlation of estimated and reference susceptances.
    pub fn susceptance_correlation(&self) -> f64 {
        let a: Vec<f64> = self.rows.iter().map(|r| r.b_est).collect();
        let b: Vec<f64> = self.rows.iter().map(|r| r.b_ref).collect();
        pearson(&a, &b)
    }

    /// Median `|Y^(r)_ij|` over matched lines.
    pub fn median_abs_ref(&self) -> f64 {
        let mut m: Vec<f64> = self.rows.iter().map(|r| r.y_ref_abs).collect();
        m.sort_by(f64::total_cmp);
        match m.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => m[n / 2],
            n => 0.5 * (m[n / 2 - 1] + m[n / 2]),
        }
    }

    /// Whether every flagged line couples less strongly than the median line.
    pub fn violations_below_median(&self) -> bool {
        let med = self.median_abs_ref();
        self.violations().iter().all(|r| r.y_ref_abs < med)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegPoint {
    pub alpha: f64,
    /// Relative Frobenius error of the learned reduced admittance matrix.
    pub quality: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegSweep {
    pub points: Vec<RegPoint>,
    /// Description of the quality indicator.
    pub indicator: String,
}

impl RegSweep {
    /// Position of the best (lowest) quality value.
    pub fn argmin_index(&self) -> Option<usize> {
        self.points
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.quality.map(|q| (k, q)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    pub fn argmin(&self) -> Option<f64> {
        self.argmin_index().map(|k| self.points[k].alpha)
    }

    /// The minimum lies strictly inside the sweep (sorted by `alpha`).
    pub fn has_interior_min(&self) -> bool {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.sort_by(|&a, &b| self.points[a].alpha.total_cmp(&self.points[b].alpha));
        match self.argmin_index() {
            Some(k) => {
                let pos = order.iter().position(|&o| o == k).unwrap();
                pos > 0 && pos + 1 < order.len()
            }
            None => false,
        }
    }
}

/// Train once per regularization coefficient on the reduced topology and
/// score the learned admittances against the Kron reference.
pub fn reg_sweep(
    reference: &ReducedModel,
    train: &Observations,
    alphas: &[f64],
    base: &TrainConfig,
) -> Result<RegSweep, MetricsError> {
    if alphas.is_empty() {
        return Err(MetricsError::Invalid("empty regularization list".into()));
    }
    let topo = Topology::from_reduced(reference);
    let points = alphas
        .par_iter()
        .map(|&alpha| {
            let cfg = TrainConfig {
                reg_coeff: alpha,
                ..base.clone()
            };
            match train_pgnn(&topo, train, &cfg) {
                Ok((m, report)) => RegPoint {
                    alpha,
                    quality: Some(relative_frobenius(&m.admittance(), &reference.y_reduced)),
                    final_loss: Some(report.final_loss.loss),
                    error: None,
                },
                Err(e) => {
                    log::warn!("regularization {alpha:e} failed: {e}");
                    RegPoint {
                        alpha,
                        quality: None,
                        final_loss: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(RegSweep {
        points,
        indicator: "relative Frobenius error of the learned reduced admittance matrix".into(),
    })
}
