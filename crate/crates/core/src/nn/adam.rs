use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParameterStore;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Tensor {
        &self.v[idx]
    }
}

/// Applies one bias-corrected Adam update using the gradients held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!("optimizer tracks {} arrays, store has {}", state.m.len(), store.len())));
    }
    state.step += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for idx in 0..store.len() {
        let grad = store.grad_at(idx).data().to_vec();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let w = store.value_mut(idx).data_mut();
        for k in 0..w.len() {
            let g = grad[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            w[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Gradients;

    fn store_with(values: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(values.to_vec())).unwrap();
        s
    }

    fn set_grad(store: &mut ParameterStore, g: &[f64]) {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(0).data_mut().copy_from_slice(g);
        store.set_grads(&grads).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[1.5, -2.0]);
        let mut state = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut state).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut s = store_with(&[0.0]);
        set_grad(&mut s, &[1.0]);
        let mut state = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut state).unwrap();
        // m = 0.1, v = 0.001; corrected both to 1 -> delta = -lr / (1 + eps)
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = -0.001 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        let delta = s.get("w").unwrap().data()[0];
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + 0.001).abs() < 1e-10);
    }

    #[test]
    fn identical_parameters_receive_identical_updates() {
        let mut s = store_with(&[0.3, 0.3]);
        let mut state = AdamState::new(&s, AdamConfig { learning_rate: 0.01, ..Default::default() });
        for g in [0.5, -1.0, 2.0] {
            set_grad(&mut s, &[g, g]);
            adam_step(&mut s, &mut state).unwrap();
        }
        let w = s.get("w").unwrap().data();
        assert_eq!(w[0].to_bits(), w[1].to_bits());
    }
}
