//! Fully connected and graph-masked layers with batched forward/backward.
//!
//! Batches are matrices with one column per sample (dense layers) or one
//! column per (sample, node) pair in sample-major order (graph layers).
//! Every layer flattens its parameters as weights in column-major order
//! followed by biases.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    SoftSign,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::SoftSign => z / (1.0 + z.abs()),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SoftSign => {
                let d = 1.0 + z.abs();
                1.0 / (d * d)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn record(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::SoftSign => tape.softsign(z),
            Activation::Identity => z,
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "softsign" => Ok(Activation::SoftSign),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> usize {
    dst.copy_from_slice(&src[..dst.len()]);
    dst.len()
}

fn check_finite(m: &DMatrix<f64>, op: &'static str) -> Result<(), DiffError> {
    match m.iter().position(|x| !x.is_finite()) {
        Some(node) => Err(DiffError::NonFiniteValue { op, node }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `n_out × n_in`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DMatrix<f64>, biases: DVector<f64>, activation: Activation) -> Result<Self, DiffError> {
        if biases.len() != weights.nrows() {
            return Err(DiffError::DimensionMismatch {
                what: "dense layer biases",
                expected: weights.nrows(),
                got: biases.len(),
            });
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Uniform Xavier weights, zero biases.
    pub fn xavier(n_in: usize, n_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            weights: xavier(n_out, n_in, rng),
            biases: DVector::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = &self.weights * x;
        add_bias(&mut pre, &self.biases);
        pre
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let act = self.activation;
        self.pre_activation(x).map(|z| act.apply(z))
    }

    /// Accumulates parameter gradients into `grad` and returns the input adjoint.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        pre: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
        grad: &mut [f64],
    ) -> DMatrix<f64> {
        let act = self.activation;
        let d_pre = d_out.zip_map(pre, |d, z| d * act.derivative(z));
        let gw = &d_pre * x.transpose();
        let nw = self.weights.len();
        accumulate(&mut grad[..nw], gw.as_slice());
        accumulate(&mut grad[nw..self.n_params()], d_pre.column_sum().as_slice());
        self.weights.tr_mul(&d_pre)
    }

    /// Records the layer for a single sample on a tape.
    pub fn record(&self, tape: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
        let (n_out, n_in) = self.weights.shape();
        let nw = n_out * n_in;
        (0..n_out)
            .map(|r| {
                let w: Vec<Var> = (0..n_in).map(|c| params[c * n_out + r]).collect();
                let z = tape.dot(&w, x);
                let z = tape.add(z, params[nw + r]);
                self.activation.record(tape, z)
            })
            .collect()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(self.biases.as_slice());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let k = copy_into(self.weights.as_mut_slice(), src);
        k + copy_into(self.biases.as_mut_slice(), &src[k..])
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pres: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    /// `sizes` lists the input width, each hidden width and the output width.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| DenseLayer::xavier(w[0], w[1], if k == last { output } else { hidden }, rng))
            .collect();
        Self { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<(), DiffError> {
        if src.len() != self.n_params() {
            return Err(DiffError::DimensionMismatch {
                what: "mlp parameters",
                expected: self.n_params(),
                got: src.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            k += l.read_params(&src[k..]);
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.layers.iter().fold(x.clone(), |h, l| l.forward(&h))
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<MlpCache, DiffError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let pre = l.pre_activation(&h);
            let act = l.activation;
            let out = pre.map(|z| act.apply(z));
            inputs.push(h);
            pres.push(pre);
            h = out;
        }
        check_finite(&h, "dense_forward")?;
        Ok(MlpCache {
            inputs,
            pres,
            output: h,
        })
    }

    /// Parameter gradients and input adjoint for output adjoint `d_out`.
    pub fn backward(&self, cache: &MlpCache, d_out: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), DiffError> {
        let mut grad = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.n_params();
        }
        let mut d = d_out.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let off = offsets[idx];
            d = l.backward(
                &cache.inputs[idx],
                &cache.pres[idx],
                &d,
                &mut grad[off..off + l.n_params()],
            );
        }
        if let Some(node) = grad.iter().position(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteValue {
                op: "dense_backward",
                node,
            });
        }
        Ok((grad, d))
    }

    pub fn record(&self, tape: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
        let mut h = x.to_vec();
        let mut k = 0;
        for l in &self.layers {
            h = l.record(tape, &params[k..k + l.n_params()], &h);
            k += l.n_params();
        }
        h
    }
}

/// Message-passing layer restricted to a fixed neighbor structure:
/// `h_i' = act(W_s h_i + W_n Σ_{j∈N(i)} h_j + W_e e_i + b)`, where `e_i` is a
/// per-node edge-feature aggregate supplied by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMaskedLayer {
    pub w_self: DMatrix<f64>,
    pub w_nbr: DMatrix<f64>,
    pub w_edge: DMatrix<f64>,
    /// One bias column per node.
    pub biases: DMatrix<f64>,
    pub activation: Activation,
    /// Adjacency mask: neighbor positions of every node.
    pub neighbors: Vec<Vec<usize>>,
}

impl GraphMaskedLayer {
    pub fn xavier(
        neighbors: Vec<Vec<usize>>,
        n_in: usize,
        n_edge: usize,
        n_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w_self: xavier(n_out, n_in, rng),
            w_nbr: xavier(n_out, n_in, rng),
            w_edge: xavier(n_out, n_edge, rng),
            biases: DMatrix::zeros(n_out, neighbors.len()),
            activation,
            neighbors,
        }
    }

    pub fn zeros(neighbors: Vec<Vec<usize>>, n_in: usize, n_edge: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            w_self: DMatrix::zeros(n_out, n_in),
            w_nbr: DMatrix::zeros(n_out, n_in),
            w_edge: DMatrix::zeros(n_out, n_edge),
            biases: DMatrix::zeros(n_out, neighbors.len()),
            activation,
            neighbors,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn n_params(&self) -> usize {
        self.w_self.len() + self.w_nbr.len() + self.w_edge.len() + self.biases.len()
    }

    /// Column `s·n + i` of the result is `Σ_{j∈N(i)} h[s·n + j]`.
    pub fn aggregate(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, n) = (h.nrows(), self.n_nodes());
        let src = h.as_slice();
        let mut agg = DMatrix::zeros(d, h.ncols());
        let dst = agg.as_mut_slice();
        for s in 0..h.ncols() / n {
            for (i, nbrs) in self.neighbors.iter().enumerate() {
                let out = (s * n + i) * d;
                for &j in nbrs {
                    let inp = (s * n + j) * d;
                    for r in 0..d {
                        dst[out + r] += src[inp + r];
                    }
                }
            }
        }
        agg
    }

    /// Transpose of [`aggregate`](Self::aggregate), accumulated into `into`.
    fn scatter(&self, g: &DMatrix<f64>, into: &mut DMatrix<f64>) {
        let (d, n) = (g.nrows(), self.n_nodes());
        let src = g.as_slice();
        let dst = into.as_mut_slice();
        for s in 0..g.ncols() / n {
            for (i, nbrs) in self.neighbors.iter().enumerate() {
                let inp = (s * n + i) * d;
                for &j in nbrs {
                    let out = (s * n + j) * d;
                    for r in 0..d {
                        dst[out + r] += src[inp + r];
                    }
                }
            }
        }
    }

    fn pre_activation(&self, h: &DMatrix<f64>, agg: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = &self.w_self * h;
        pre.gemm(1.0, &self.w_nbr, agg, 1.0);
        pre.gemm(1.0, &self.w_edge, e, 1.0);
        let n = self.n_nodes();
        for (c, mut col) in pre.column_iter_mut().enumerate() {
            col += self.biases.column(c % n);
        }
        pre
    }

    pub fn forward(&self, h: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        let act = self.activation;
        self.pre_activation(h, &self.aggregate(h), e).map(|z| act.apply(z))
    }

    fn backward(
        &self,
        h: &DMatrix<f64>,
        agg: &DMatrix<f64>,
        e: &DMatrix<f64>,
        pre: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
        grad: &mut [f64],
    ) -> DMatrix<f64> {
        let act = self.activation;
        let d_pre = d_out.zip_map(pre, |d, z| d * act.derivative(z));
        let mut k = 0;
        for (w, input) in [(&self.w_self, h), (&self.w_nbr, agg), (&self.w_edge, e)] {
            let gw = &d_pre * input.transpose();
            accumulate(&mut grad[k..k + w.len()], gw.as_slice());
            k += w.len();
        }
        let (d, n) = (self.biases.nrows(), self.n_nodes());
        for (c, col) in d_pre.column_iter().enumerate() {
            let off = k + (c % n) * d;
            accumulate(&mut grad[off..off + d], col.as_slice());
        }
        let mut d_h = self.w_self.tr_mul(&d_pre);
        let d_agg = self.w_nbr.tr_mul(&d_pre);
        self.scatter(&d_agg, &mut d_h);
        d_h
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_self.as_slice());
        out.extend_from_slice(self.w_nbr.as_slice());
        out.extend_from_slice(self.w_edge.as_slice());
        out.extend_from_slice(self.biases.as_slice());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = copy_into(self.w_self.as_mut_slice(), src);
        k += copy_into(self.w_nbr.as_mut_slice(), &src[k..]);
        k += copy_into(self.w_edge.as_mut_slice(), &src[k..]);
        k + copy_into(self.biases.as_mut_slice(), &src[k..])
    }
}

/// A stack of graph-masked layers sharing one neighbor structure and one
/// edge-feature input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNet {
    pub layers: Vec<GraphMaskedLayer>,
}

#[derive(Debug, Clone)]
pub struct GraphNetCache {
    inputs: Vec<DMatrix<f64>>,
    aggs: Vec<DMatrix<f64>>,
    pres: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl GraphNet {
    /// `hidden` Xavier-initialized layers of the given width followed by a
    /// zero-initialized linear output layer, so the untrained net outputs 0.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        neighbors: &[Vec<usize>],
        n_in: usize,
        n_edge: usize,
        width: usize,
        hidden: usize,
        n_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut d = n_in;
        for _ in 0..hidden {
            layers.push(GraphMaskedLayer::xavier(
                neighbors.to_vec(),
                d,
                n_edge,
                width,
                activation,
                rng,
            ));
            d = width;
        }
        layers.push(GraphMaskedLayer::zeros(
            neighbors.to_vec(),
            d,
            n_edge,
            n_out,
            Activation::Identity,
        ));
        Self { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(GraphMaskedLayer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<(), DiffError> {
        if src.len() != self.n_params() {
            return Err(DiffError::DimensionMismatch {
                what: "graph net parameters",
                expected: self.n_params(),
                got: src.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            k += l.read_params(&src[k..]);
        }
        Ok(())
    }

    pub fn forward(&self, h: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        self.layers.iter().fold(h.clone(), |x, l| l.forward(&x, e))
    }

    pub fn forward_cached(&self, h: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<GraphNetCache, DiffError> {
        let mut cache = GraphNetCache {
            inputs: Vec::with_capacity(self.layers.len()),
            aggs: Vec::with_capacity(self.layers.len()),
            pres: Vec::with_capacity(self.layers.len()),
            output: DMatrix::zeros(0, 0),
        };
        let mut x = h.clone();
        for l in &self.layers {
            let agg = l.aggregate(&x);
            let pre = l.pre_activation(&x, &agg, e);
            let act = l.activation;
            let out = pre.map(|z| act.apply(z));
            cache.inputs.push(x);
            cache.aggs.push(agg);
            cache.pres.push(pre);
            x = out;
        }
        check_finite(&x, "graph_forward")?;
        cache.output = x;
        Ok(cache)
    }

    /// Parameter gradients for output adjoint `d_out`.
    pub fn backward(
        &self,
        cache: &GraphNetCache,
        e: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
    ) -> Result<Vec<f64>, DiffError> {
        let mut grad = vec![0.0; self.n_params()];
        let mut end = grad.len();
        let mut d = d_out.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let start = end - l.n_params();
            d = l.backward(
                &cache.inputs[idx],
                &cache.aggs[idx],
                e,
                &cache.pres[idx],
                &d,
                &mut grad[start..end],
            );
            end = start;
        }
        if let Some(node) = grad.iter().position(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteValue {
                op: "graph_backward",
                node,
            });
        }
        Ok(grad)
    }
}
