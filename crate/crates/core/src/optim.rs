//! Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const STATE_M: &str = "adam.m.";
const STATE_V: &str = "adam.v.";
const STATE_STEP: &str = "adam.step";

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((pi, mi), vi), &gi) in iter {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as named tensors, for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, t) in &self.m {
            out.insert(format!("{STATE_M}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{STATE_V}{k}"), t.clone());
        }
        out.insert(STATE_STEP, Tensor::scalar(self.step as f64));
        out
    }

    pub fn load_state(&mut self, state: &ParamStore) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (name, t) in state.iter() {
            if let Some(k) = name.strip_prefix(STATE_M) {
                self.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix(STATE_V) {
                self.v.insert(k.to_string(), t.clone());
            }
        }
        self.step = state.require(STATE_STEP)?.item() as u64;
        Ok(())
    }

    pub fn is_state_key(name: &str) -> bool {
        name.starts_with("adam.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.get("x").unwrap().item();
            let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x))]);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params.get("x").unwrap().item().abs() < 1e-2);
    }

    #[test]
    fn state_roundtrip() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::ones([2]));
        let mut opt = Adam::new(0.01);
        let grads = BTreeMap::from([("w".to_string(), Tensor::full([2], 0.5))]);
        opt.step(&mut params, &grads).unwrap();
        let mut restored = Adam::new(0.01);
        restored.load_state(&opt.state()).unwrap();
        assert_eq!(restored, opt);
    }
}
