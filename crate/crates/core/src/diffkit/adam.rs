use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) {
    assert_eq!(params.len(), state.m.len(), "parameter count");
    assert_eq!(grads.len(), state.m.len(), "gradient count");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            adam_step(&mut s, &mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let lr = 1e-3;
        let mut s = AdamState::new(2, lr);
        let mut p = vec![0.0, 0.0];
        let g = [0.3, -2e-4];
        adam_step(&mut s, &mut p, &g);
        // m̂ = g and v̂ = g² at t = 1
        for k in 0..2 {
            assert_relative_eq!(p[k], -lr * g[k] / (g[k].abs() + 1e-8), max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let lr = 0.01;
        let mut s = AdamState::new(1, lr);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut s, &mut p, &[-4.0]);
            last = p[0] - before;
        }
        assert_relative_eq!(last, lr, max_relative = 1e-6);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = AdamState::new(4, 0.05);
            let mut p = vec![0.1, 0.2, 0.3, 0.4];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| (x * k as f64).sin()).collect();
                adam_step(&mut s, &mut p, &g);
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
