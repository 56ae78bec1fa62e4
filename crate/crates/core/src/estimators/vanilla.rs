//! Fully connected baseline mapping observed `(v, θ)` to observed `(p, q)`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Checkpoint, EstimatorError, InjectionModel, LossRecord, ModelKind, Observations, Prediction, TrainConfig,
    TrainReport, DIVERGENCE_FACTOR, LOSS_FLOOR,
};
use crate::diffkit::{adam_step, Activation, AdamState, Mlp, ParamVector};

/// Training loss at or below which the baseline counts as fitted.
pub const SUCCESS_LOSS: f64 = 1e-4;

/// Per-feature affine standardization fitted on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

fn moments(rows: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = rows.ncols() as f64;
    rows.row_iter()
        .map(|r| {
            let mean = r.sum() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            // constant features (the slack angle) keep unit scale
            let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            (mean, std)
        })
        .unzip()
}

impl Scaler {
    pub fn fit(obs: &Observations) -> Self {
        let (in_mean, in_std) = moments(&inputs(obs));
        let (out_mean, out_std) = moments(&targets(obs));
        Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }

    pub fn identity(n_nodes: usize) -> Self {
        Self {
            in_mean: vec![0.0; 2 * n_nodes],
            in_std: vec![1.0; 2 * n_nodes],
            out_mean: vec![0.0; 2 * n_nodes],
            out_std: vec![1.0; 2 * n_nodes],
        }
    }
}

/// `[v; θ]`, one column per sample.
fn inputs(obs: &Observations) -> DMatrix<f64> {
    let n = obs.n_nodes;
    DMatrix::from_fn(2 * n, obs.n_samples(), |r, s| {
        if r < n {
            obs.v[s * n + r]
        } else {
            obs.theta[s * n + r - n]
        }
    })
}

/// `[p; q]`, one column per sample.
fn targets(obs: &Observations) -> DMatrix<f64> {
    let n = obs.n_nodes;
    DMatrix::from_fn(2 * n, obs.n_samples(), |r, s| {
        if r < n {
            obs.p[s * n + r]
        } else {
            obs.q[s * n + r - n]
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaNet {
    pub n_nodes: usize,
    pub mlp: Mlp,
    pub scaler: Scaler,
}

struct Prepared {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl VanillaNet {
    pub fn new(n_nodes: usize, config: &TrainConfig, scaler: Scaler) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let width = config.units.unwrap_or(2 * n_nodes);
        let mut sizes = vec![2 * n_nodes];
        sizes.extend(std::iter::repeat(width).take(config.hidden_layers));
        sizes.push(2 * n_nodes);
        Self {
            n_nodes,
            mlp: Mlp::new(&sizes, config.activation, Activation::Identity, &mut rng),
            scaler,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.mlp.layers[0].n_in()];
        w.extend(self.mlp.layers.iter().map(|l| l.n_out()));
        w
    }

    pub fn hidden_activation(&self) -> Activation {
        match self.mlp.layers.len() {
            1 => Activation::Identity,
            _ => self.mlp.layers[0].activation,
        }
    }

    pub fn params(&self) -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push_section("phi", &self.mlp.params());
        pv
    }

    pub fn from_params(
        n_nodes: usize,
        widths: &[usize],
        activation: Activation,
        scaler: Scaler,
        params: &ParamVector,
    ) -> Result<Self, EstimatorError> {
        let bad = |m: String| EstimatorError::Checkpoint(m);
        if widths.len() < 2 || widths[0] != 2 * n_nodes || widths[widths.len() - 1] != 2 * n_nodes {
            return Err(bad(format!(
                "layer widths {widths:?} do not fit {n_nodes} observed nodes"
            )));
        }
        if scaler.in_mean.len() != 2 * n_nodes || scaler.out_std.len() != 2 * n_nodes {
            return Err(bad("scaler dimensions do not match the network".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(widths, activation, Activation::Identity, &mut rng);
        let phi = params.section("phi").map_err(|e| bad(e.to_string()))?;
        mlp.set_params(phi).map_err(|e| bad(e.to_string()))?;
        Ok(Self { n_nodes, mlp, scaler })
    }

    pub fn checkpoint(&self, observed: Vec<usize>, n_buses: usize) -> Checkpoint {
        Checkpoint::Vanilla {
            observed,
            n_buses,
            widths: self.widths(),
            activation: self.hidden_activation(),
            scaler: self.scaler.clone(),
            params: self.params(),
        }
    }

    fn prepare(&self, obs: &Observations) -> Result<Prepared, EstimatorError> {
        obs.check()?;
        if obs.n_nodes != self.n_nodes {
            return Err(EstimatorError::DimensionMismatch {
                what: "observed nodes",
                expected: self.n_nodes,
                got: obs.n_nodes,
            });
        }
        let mut x = inputs(obs);
        for (r, mut row) in x.row_iter_mut().enumerate() {
            let (m, s) = (self.scaler.in_mean[r], self.scaler.in_std[r]);
            row.apply(|v| *v = (*v - m) / s);
        }
        Ok(Prepared { x, y: targets(obs) })
    }

    fn unscale(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
            self.scaler.out_mean[r] + self.scaler.out_std[r] * z[(r, c)]
        })
    }

    fn loss_grad(&self, data: &Prepared) -> Result<(LossRecord, Vec<f64>), EstimatorError> {
        let cache = self.mlp.forward_cached(&data.x)?;
        let y_hat = self.unscale(&cache.output);
        let norm = 1.0 / (data.x.ncols() * self.n_nodes) as f64;
        let res = &data.y - y_hat;
        let d_out = DMatrix::from_fn(res.nrows(), res.ncols(), |r, c| {
            -2.0 * norm * res[(r, c)] * self.scaler.out_std[r]
        });
        let (grad, _) = self.mlp.backward(&cache, &d_out)?;
        let data_term = norm * res.norm_squared();
        Ok((
            LossRecord {
                epoch: 0,
                loss: data_term,
                data_term,
                reg_term: 0.0,
            },
            grad,
        ))
    }
}

impl InjectionModel for VanillaNet {
    fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    fn predict(&self, obs: &Observations) -> Result<Prediction, EstimatorError> {
        let data = self.prepare(obs)?;
        let y = self.unscale(&self.mlp.forward(&data.x));
        let n = self.n_nodes;
        let mut p = Vec::with_capacity(obs.v.len());
        let mut q = Vec::with_capacity(obs.v.len());
        for col in y.column_iter() {
            p.extend(col.rows(0, n).iter());
            q.extend(col.rows(n, n).iter());
        }
        Ok(Prediction { p, q })
    }
}

/// `(1/(N·n)) Σ ‖S − NN(V)‖²` and its gradient with respect to the weights.
pub fn vanilla_loss(net: &VanillaNet, obs: &Observations) -> Result<(LossRecord, Vec<f64>), EstimatorError> {
    net.loss_grad(&net.prepare(obs)?)
}

pub fn train_vanilla(train: &Observations, config: &TrainConfig) -> Result<(VanillaNet, TrainReport), EstimatorError> {
    config.validate()?;
    train.check()?;
    let mut net = VanillaNet::new(train.n_nodes, config, Scaler::fit(train));
    let data = net.prepare(train)?;
    let ns = train.n_samples();
    let mut theta = net.mlp.params();
    let mut adam = AdamState::new(theta.len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..ns).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut initial = None;

    for epoch in 0..config.epochs {
        adam.lr = config.lr_at(epoch);
        let mut rec = LossRecord {
            epoch,
            loss: 0.0,
            data_term: 0.0,
            reg_term: 0.0,
        };
        let batches: Vec<Vec<usize>> = match config.batch_size {
            Some(b) if b < ns => {
                order.shuffle(&mut rng);
                order.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![],
        };
        let mut step = |batch: &Prepared, w: f64| -> Result<(), EstimatorError> {
            let (r, grad) = net.loss_grad(batch)?;
            rec.loss += w * r.loss;
            rec.data_term += w * r.data_term;
            adam_step(&mut adam, &mut theta, &grad);
            net.mlp.set_params(&theta)?;
            Ok(())
        };
        if batches.is_empty() {
            step(&data, 1.0)?;
        } else {
            let w = 1.0 / batches.len() as f64;
            for b in &batches {
                let sub = Prepared {
                    x: data.x.select_columns(b),
                    y: data.y.select_columns(b),
                };
                step(&sub, w)?;
            }
        }
        let first = *initial.get_or_insert(rec.loss);
        if !rec.loss.is_finite() || rec.loss > DIVERGENCE_FACTOR * first.max(LOSS_FLOOR) {
            return Err(EstimatorError::Divergence { epoch, loss: rec.loss });
        }
        trace.push(rec);
    }

    let (mut final_loss, _) = net.loss_grad(&data)?;
    final_loss.epoch = config.epochs;
    if !final_loss.loss.is_finite() {
        return Err(EstimatorError::Divergence {
            epoch: config.epochs,
            loss: final_loss.loss,
        });
    }
    log::info!("vanilla: {} epochs, final loss {:.3e}", config.epochs, final_loss.loss);
    let success = final_loss.loss <= SUCCESS_LOSS;
    Ok((
        net,
        TrainReport {
            model: ModelKind::Vanilla,
            epochs: config.epochs,
            trace,
            final_loss,
            success: Some(success),
            config: config.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{central_difference, relative_error};
    use crate::estimators::LoadedModel;
    use rand::Rng;

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

    fn small_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            epochs: 300,
            net: None,
            units: Some(6),
            hidden_layers: 2,
            activation: Activation::SoftSign,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_output_is_memorized() {
        // varying voltages, one repeated injection vector
        let mut obs = random_obs(1, 3, 8);
        let (p, q) = (obs.p[..3].to_vec(), obs.q[..3].to_vec());
        for s in 0..8 {
            obs.p[s * 3..s * 3 + 3].copy_from_slice(&p);
            obs.q[s * 3..s * 3 + 3].copy_from_slice(&q);
        }
        let (net, report) = train_vanilla(&obs, &small_config()).unwrap();
        let (first, last) = (report.trace[0].loss, report.final_loss.loss);
        assert!(first > 1e-2);
        assert!(last < 1e-4 * first, "{first:e} -> {last:e}");
        assert_eq!(report.success, Some(true));
        let pred = net.predict(&obs).unwrap();
        assert!((pred.p[4] - p[1]).abs() < 1e-2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obs = random_obs(2, 3, 7);
        let cfg = small_config();
        let net = VanillaNet::new(3, &cfg, Scaler::fit(&obs));
        let (_, grad) = vanilla_loss(&net, &obs).unwrap();
        let mut probe = net.clone();
        let fd = central_difference(
            |t| {
                probe.mlp.set_params(t).unwrap();
                vanilla_loss(&probe, &obs).unwrap().0.loss
            },
            &net.mlp.params(),
            1e-5,
        );
        assert!(relative_error(&grad, &fd) < 1e-5);
    }

    #[test]
    fn training_sample_error_is_bounded_by_loss() {
        let obs = random_obs(4, 2, 10);
        let (net, report) = train_vanilla(&obs, &small_config()).unwrap();
        let pred = net.predict(&obs).unwrap();
        let n = obs.n_nodes as f64;
        let bound = (report.final_loss.loss * n * obs.n_samples() as f64).sqrt();
        for s in 0..obs.n_samples() {
            let sq: f64 = (0..2)
                .map(|i| {
                    let k = s * 2 + i;
                    (pred.p[k] - obs.p[k]).powi(2) + (pred.q[k] - obs.q[k]).powi(2)
                })
                .sum();
            assert!(sq.sqrt() <= bound + 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpointable() {
        let obs = random_obs(6, 2, 12);
        let cfg = TrainConfig {
            batch_size: Some(5),
            epochs: 30,
            ..small_config()
        };
        let (a, ra) = train_vanilla(&obs, &cfg).unwrap();
        let (b, rb) = train_vanilla(&obs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);

        let ck = a.checkpoint(vec![1, 4], 5);
        let back: Checkpoint = serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap();
        match back.load().unwrap() {
            LoadedModel::Vanilla(m) => assert_eq!(m, a),
            _ => panic!("wrong model kind"),
        }
    }
}
