//! Scalar reverse-mode differentiation over a recorded tape.
//!
//! Each node stores its value and the local partial derivative towards each
//! parent. Nodes are appended in evaluation order, which is a topological
//! order, so the backward sweep is a single reverse pass.

use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    values: Vec<f64>,
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.0[v.index()]
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            values: Vec::with_capacity(nodes),
            spans: Vec::with_capacity(nodes),
            edges: Vec::with_capacity(edges),
            first_non_finite: None,
        }
    }

    /// Drop all nodes but keep the allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.spans.clear();
        self.edges.clear();
        self.first_non_finite = None;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    #[inline]
    fn push(&mut self, value: f64, parents: &[(Var, f64)], op: &'static str) -> Var {
        let start = self.edges.len() as u32;
        self.edges.extend(parents.iter().map(|&(p, d)| (p.0, d)));
        self.spans.push((start, parents.len() as u32));
        let id = self.values.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some((id, op));
        }
        self.values.push(value);
        Var(id as u32)
    }

    /// A leaf: an input or a parameter.
    pub fn var(&mut self, value: f64) -> Var {
        self.push(value, &[], "input")
    }

    pub fn vars(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.var(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[(a, 1.0), (b, 1.0)], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[(a, 1.0), (b, -1.0)], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[(a, y), (b, x)], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x / y, &[(a, 1.0 / y), (b, -x / (y * y))], "div")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, &[(a, -1.0)], "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(v, &[(a, c)], "scale")
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[(a, 1.0)], "offset")
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, &[(a, 2.0 * x)], "sqr")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let (s, c) = self.value(a).sin_cos();
        self.push(s, &[(a, c)], "sin")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let (s, c) = self.value(a).sin_cos();
        self.push(c, &[(a, -s)], "cos")
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(1.0 / x, &[(a, -1.0 / (x * x))], "recip")
    }

    pub fn softsign(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = 1.0 + x.abs();
        self.push(x / d, &[(a, 1.0 / (d * d))], "softsign")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.push(x, &[(a, 1.0)], "relu")
        } else {
            self.push(0.0, &[(a, 0.0)], "relu")
        }
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push(v, &parents, "sum")
    }

    /// `bias + Σ c_k x_k` with constant coefficients.
    pub fn linear(&mut self, terms: &[(Var, f64)], bias: f64) -> Var {
        let v = terms.iter().fold(bias, |acc, &(x, c)| acc + c * self.value(x));
        self.push(v, terms, "linear")
    }

    /// `Σ a_k b_k` of two variable vectors.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len());
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            parents.push((x, yv));
            parents.push((y, xv));
        }
        self.push(v, &parents, "dot")
    }

    /// Reverse sweep seeded with the given output adjoints.
    pub fn backward_with(&self, seeds: &[(Var, f64)]) -> Result<Gradients, DiffError> {
        if let Some((node, op)) = self.first_non_finite {
            return Err(DiffError::NonFiniteValue { op, node });
        }
        let mut adj = vec![0.0; self.values.len()];
        for &(v, a) in seeds {
            adj[v.index()] += a;
        }
        for k in (0..self.values.len()).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let (start, len) = self.spans[k];
            for &(p, d) in &self.edges[start as usize..(start + len) as usize] {
                adj[p as usize] += a * d;
            }
        }
        if let Some(k) = adj.iter().position(|a| !a.is_finite()) {
            return Err(DiffError::NonFiniteValue { op: "adjoint", node: k });
        }
        Ok(Gradients(adj))
    }

    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        self.backward_with(&[(output, 1.0)])
    }
}
