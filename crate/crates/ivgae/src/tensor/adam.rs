//! Named parameter store and the Adam update.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// All trainable tensors, addressable by name. Iteration order is insertion
/// order, which fixes the order parameters appear on the tape and keeps runs
/// reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter; each name may be added exactly once.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub(crate) fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Optimizer configuration; defaults match the training recipe
/// (lr 0.001, betas (0.9, 0.999), eps 1e-8).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { m, v, t: 0 }
    }
}

/// One Adam step with bias correction. `grads[i]` aligns with the store's
/// i-th parameter; `None` means the parameter received no gradient this step
/// and is treated as zero-gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let zero: Vec<f64> = Vec::new();
    for i in 0..params.len() {
        let g = grads[i].as_ref().unwrap_or(&zero);
        let tensor = params.tensor_at_mut(i);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, p) in tensor.values_mut().iter_mut().enumerate() {
            let gj = g.get(j).copied().unwrap_or(0.0);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let mut state = AdamState::for_params(&params);
        let grads = vec![Some(vec![0.0, 0.0])];
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().values(), &[1.5, -0.5]);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_about_lr() {
        // m_hat = 1, v_hat = 1 at t=1, so the step is lr/(1+eps).
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.7)).unwrap();
        let mut state = AdamState::for_params(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[Some(vec![1.0])], &mut state, &cfg).unwrap();
        let expected = 0.7 - cfg.lr / (1.0 + cfg.eps);
        let got = params.get("w").unwrap().values()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, want {expected}");
        assert!((0.7 - got - cfg.lr).abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_stay_identical() {
        let mk = || {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
                .unwrap();
            p
        };
        let (mut p1, mut p2) = (mk(), mk());
        let mut s1 = AdamState::for_params(&p1);
        let mut s2 = AdamState::for_params(&p2);
        let g = vec![Some(vec![0.3, -0.1, 0.9])];
        for _ in 0..5 {
            adam_step(&mut p1, &g, &mut s1, &AdamConfig::default()).unwrap();
            adam_step(&mut p2, &g, &mut s2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p1.get("w").unwrap().values(), p2.get("w").unwrap().values());
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut state = AdamState::for_params(&params);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut params, &[None], &mut state, &cfg).is_err());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(params.insert("w", Tensor::scalar(2.0)).is_err());
    }
}
