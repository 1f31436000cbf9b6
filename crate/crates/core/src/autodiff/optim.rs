use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::Result;

/// `params − lr · grad`.
pub fn sgd_step(params: &ParamSet, grad: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.zip_map(grad, |p, g| p - lr * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, owned by the caller between steps.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let n = params.total_len();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(params: &ParamSet, grad: &ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<ParamSet> {
    params.check_congruent(grad)?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut flat = params.flatten();
    for (i, (p, g)) in flat.iter_mut().zip(grad.flatten()).enumerate() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        *p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    params.unflatten(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn pair(a: f64, b: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("p", Tensor::vector(vec![a, b])).unwrap();
        p
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&pair(0.0, 0.0), &pair(1.0, 1.0), 0.1).unwrap().flatten(), vec![-0.1, -0.1]);
        let p = pair(0.3, -0.2);
        assert_eq!(sgd_step(&p, &pair(0.0, 0.0), 0.1).unwrap(), p);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let p = pair(0.3, -0.2);
        let mut st = AdamState::new(&p);
        assert_eq!(adam_step(&p, &pair(0.0, 0.0), &mut st, &AdamConfig::default()).unwrap(), p);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², step = lr · g / (|g| + eps)
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let p = pair(1.0, 1.0);
        let g = pair(0.5, -3.0);
        let mut st = AdamState::new(&p);
        let q = adam_step(&p, &g, &mut st, &cfg).unwrap().flatten();
        let want0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let want1 = 1.0 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((q[0] - want0).abs() < 1e-15);
        assert!((q[1] - want1).abs() < 1e-15);
        assert!(((1.0 - q[0]) - 0.01).abs() < 1e-9);
    }
}
