//! Synthetic operating-point datasets.
//!
//! Every sample draws its randomness from a ChaCha stream keyed by
//! `(seed, sample index)`, so parallel and serial generation agree bit for bit.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::grid::{assemble_admittance, grid_hash, GridCase, GridError};
use crate::powerflow::{scaled_load, solve_dispatched, PfError, PfSolveOptions, PowerState, VoltageState};

/// Attempts allowed for one sample before generation is declared stalled.
const MAX_ATTEMPTS: usize = 20;
/// Truncation of the multiplicative load noise, in standard deviations.
const NOISE_CLIP_SIGMAS: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("generation stalled: {rejected} of {attempts} power-flow solves rejected")]
    GenerationStalled { rejected: usize, attempts: usize },
    #[error("reference operating point is not solvable: {0}")]
    Reference(#[source] PfError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    /// Common load scaling.
    C1,
    /// Scaling plus joint multiplicative noise on (p, q).
    C2,
    /// Scaling plus independent noise on p and q.
    C3,
    /// Scaling with a random third of the generators decommitted.
    C4,
    /// Scaling with random generator costs.
    C5,
    /// C1 with a constant global phase shift.
    C6,
}

impl std::str::FromStr for CaseId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_start_matches('#') {
            "c1" | "1" => Ok(CaseId::C1),
            "c2" | "2" => Ok(CaseId::C2),
            "c3" | "3" => Ok(CaseId::C3),
            "c4" | "4" => Ok(CaseId::C4),
            "c5" | "5" => Ok(CaseId::C5),
            "c6" | "6" => Ok(CaseId::C6),
            other => Err(format!("unknown case `{other}` (expected c1..c6)")),
        }
    }
}

impl std::fmt::Display for CaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = *self as usize + 1;
        write!(f, "c{k}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub case_id: CaseId,
    pub n_samples: usize,
    pub scale_range: [f64; 2],
    pub noise_frac: f64,
    pub pq_independent: bool,
    pub gen_dropout_frac: f64,
    pub cost_range: [f64; 2],
    pub phase_shift_deg: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Defaults for one of the six cases.
    pub fn new(case_id: CaseId, seed: u64) -> Self {
        Self {
            case_id,
            n_samples: 2000,
            scale_range: [0.8, 1.2],
            noise_frac: 0.01,
            pq_independent: case_id == CaseId::C3,
            gen_dropout_frac: if case_id == CaseId::C4 { 1.0 / 3.0 } else { 0.0 },
            cost_range: [0.5, 1.5],
            phase_shift_deg: 20.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        if !(self.scale_range[0] <= self.scale_range[1]) {
            return bad("scale_range must satisfy min <= max");
        }
        if !(self.noise_frac >= 0.0) {
            return bad("noise_frac must be non-negative");
        }
        if !(0.0..1.0).contains(&self.gen_dropout_frac) {
            return bad("gen_dropout_frac must lie in [0, 1)");
        }
        if !(self.cost_range[0] <= self.cost_range[1]) {
            return bad("cost_range must satisfy min <= max");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        Ok(())
    }

    fn noisy(&self) -> bool {
        matches!(self.case_id, CaseId::C2 | CaseId::C3) && self.noise_frac > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub lambda: f64,
    pub state: VoltageState,
    pub power: PowerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub grid_ref: String,
    pub samples: Vec<Sample>,
    pub config: ScenarioConfig,
    pub rejections: usize,
    /// Largest |inverse_pf(Y, V) − S| over all samples.
    pub max_certificate: f64,
}

/// Contents of the metadata sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: ScenarioConfig,
    pub grid_hash: String,
    pub n_buses: usize,
    pub rejections: usize,
    pub max_certificate: f64,
    pub generator: String,
}

struct Draw {
    lambda: f64,
    load: PowerState,
    costs: Vec<f64>,
    available: Vec<bool>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, dist: &Normal<f64>, sigma: f64) -> f64 {
    loop {
        let e = dist.sample(rng);
        if e.abs() <= NOISE_CLIP_SIGMAS * sigma {
            return e;
        }
    }
}

fn draw(grid: &GridCase, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Draw {
    let [lo, hi] = cfg.scale_range;
    let lambda = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let mut load = scaled_load(grid, lambda);
    if cfg.noisy() {
        let sigma = cfg.noise_frac;
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        for i in 0..load.len() {
            let ep = truncated_normal(rng, &dist, sigma);
            let eq = if cfg.pq_independent {
                truncated_normal(rng, &dist, sigma)
            } else {
                ep
            };
            load.p[i] *= 1.0 + ep;
            load.q[i] *= 1.0 + eq;
        }
    }

    let ng = grid.generators.len();
    let mut available = vec![true; ng];
    let removable: Vec<usize> = {
        let slack = grid.slack_index();
        let gen_bus = grid.generator_indices();
        (0..ng).filter(|&k| Some(gen_bus[k]) != slack).collect()
    };
    let n_drop = ((ng as f64) * cfg.gen_dropout_frac + 1e-9).floor() as usize;
    let n_drop = n_drop.min(removable.len());
    if n_drop > 0 {
        for k in sample_indices(rng, removable.len(), n_drop) {
            available[removable[k]] = false;
        }
    }

    let mut costs: Vec<f64> = grid.generators.iter().map(|g| g.cost).collect();
    if cfg.case_id == CaseId::C5 {
        let [a, b] = cfg.cost_range;
        for c in &mut costs {
            let m = if a < b { rng.gen_range(a..b) } else { a };
            *c *= m;
        }
    }
    Draw {
        lambda,
        load,
        costs,
        available,
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generate `config.n_samples` operating points on `grid`.
pub fn generate(grid: &GridCase, config: &ScenarioConfig) -> Result<SampleSet, DataError> {
    config.validate()?;
    grid.validate()?;
    let y = assemble_admittance(grid)?;
    let opts = PfSolveOptions::default();

    // The unscaled base case must be solvable before anything is drawn.
    let base_costs: Vec<f64> = grid.generators.iter().map(|g| g.cost).collect();
    let all = vec![true; grid.generators.len()];
    let base_load = scaled_load(grid, 1.0);
    solve_dispatched(grid, &y, &base_load, &base_costs, &all, &opts).map_err(DataError::Reference)?;

    let shift = if config.case_id == CaseId::C6 {
        config.phase_shift_deg.to_radians()
    } else {
        0.0
    };
    let results: Vec<(Option<Sample>, usize, f64)> = (0..config.n_samples)
        .into_par_iter()
        .map(|index| {
            let mut rng = sample_rng(config.seed, index);
            let mut rejected = 0;
            for _ in 0..MAX_ATTEMPTS {
                let d = draw(grid, config, &mut rng);
                match solve_dispatched(grid, &y, &d.load, &d.costs, &d.available, &opts) {
                    Ok(op) => {
                        let state = if shift != 0.0 {
                            op.state.shifted(shift)
                        } else {
                            op.state
                        };
                        let sample = Sample {
                            lambda: d.lambda,
                            state,
                            power: op.power,
                        };
                        return (Some(sample), rejected, op.certificate);
                    }
                    Err(_) => rejected += 1,
                }
            }
            (None, rejected, 0.0)
        })
        .collect();

    let rejections: usize = results.iter().map(|r| r.1).sum();
    let attempts = rejections + results.iter().filter(|r| r.0.is_some()).count();
    if results.iter().any(|r| r.0.is_none()) || (attempts >= MAX_ATTEMPTS && 2 * rejections > attempts) {
        return Err(DataError::GenerationStalled {
            rejected: rejections,
            attempts,
        });
    }
    if rejections > 0 {
        log::info!("rejected {rejections} non-convergent draws");
    }
    let max_certificate = results.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(SampleSet {
        grid_ref: grid_hash(grid),
        samples: results.into_iter().filter_map(|r| r.0).collect(),
        config: config.clone(),
        rejections,
        max_certificate,
    })
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.samples.first().map_or(0, |s| s.state.len())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            config: self.config.clone(),
            grid_hash: self.grid_ref.clone(),
            n_buses: self.n_buses(),
            rejections: self.rejections,
            max_certificate: self.max_certificate,
            generator: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_owned(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> SampleSet {
        SampleSet {
            grid_ref: self.grid_ref.clone(),
            samples: Vec::new(),
            config: self.config.clone(),
            rejections: self.rejections,
            max_certificate: self.max_certificate,
        }
    }

    /// Rebuild a set from a dataset CSV and its sidecar.
    pub fn from_parts(csv: &str, meta: DatasetMeta) -> Result<SampleSet, DataError> {
        let samples = read_csv(csv)?;
        Ok(SampleSet {
            grid_ref: meta.grid_hash,
            samples,
            config: meta.config,
            rejections: meta.rejections,
            max_certificate: meta.max_certificate,
        })
    }
}

/// Dataset CSV: `lambda, v_1..v_n, theta_1..theta_n, p_1..p_n, q_1..q_n`.
pub fn write_csv(set: &SampleSet) -> String {
    let n = set.n_buses();
    let mut out = String::from("lambda");
    for prefix in ["v", "theta", "p", "q"] {
        for i in 1..=n {
            write!(out, ",{prefix}_{i}").unwrap();
        }
    }
    out.push('\n');
    for s in &set.samples {
        write!(out, "{}", s.lambda).unwrap();
        for col in [&s.state.v, &s.state.theta, &s.power.p, &s.power.q] {
            for x in col {
                write!(out, ",{x}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_csv(text: &str) -> Result<Vec<Sample>, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"lambda") || (cols.len() - 1) % 4 != 0 || cols.len() < 5 {
        return Err(DataError::Parse {
            line: 1,
            message: "header must be `lambda, v_1..v_n, theta_1..theta_n, p_1..p_n, q_1..q_n`".into(),
        });
    }
    let n = (cols.len() - 1) / 4;
    let mut samples = Vec::new();
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
        if vals.len() != cols.len() {
            return Err(DataError::Parse {
                line: k + 1,
                message: format!("expected {} fields, found {}", cols.len(), vals.len()),
            });
        }
        let part = |b: usize| vals[1 + b * n..1 + (b + 1) * n].to_vec();
        samples.push(Sample {
            lambda: vals[0],
            state: VoltageState {
                v: part(0),
                theta: part(1),
            },
            power: PowerState { p: part(2), q: part(3) },
        });
    }
    Ok(samples)
}

/// Training and validation sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Draw `round(train_fraction · N)` training samples using the set's seed.
/// Validation is the whole set unless `disjoint`, in which case it is the
/// complement of the training indices.
pub fn split(n: usize, train_fraction: f64, seed: u64, disjoint: bool) -> Result<Split, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let k = (train_fraction * n as f64).round() as usize;
    if k < 1 {
        return Err(DataError::Split(format!(
            "fraction {train_fraction} of {n} samples selects nothing"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut train = sample_indices(&mut rng, n, k).into_vec();
    train.sort_unstable();
    let validation = if disjoint {
        (0..n).filter(|i| train.binary_search(i).is_err()).collect()
    } else {
        (0..n).collect()
    };
    Ok(Split { train, validation })
}

/// Split a sample set under its own seed.
pub fn split_set(set: &SampleSet, train_fraction: f64, disjoint: bool) -> Result<(SampleSet, SampleSet), DataError> {
    let s = split(set.len(), train_fraction, set.config.seed, disjoint)?;
    Ok((set.subset(&s.train), set.subset(&s.validation)))
}
