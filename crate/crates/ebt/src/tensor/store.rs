//! Named parameter storage and the Adam update rule.
//!
//! Parameters live in a `BTreeMap` so iteration order is the lexicographic
//! name order everywhere: serialization, optimizer sweeps, and debug dumps
//! all agree, which keeps reruns byte-identical.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// A named collection of trainable tensors.
#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Like `get` but with a typed error naming the missing tensor.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Copy every tensor from `other`, prefixing its name.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in &other.tensors {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }
}

/// Adam with bias correction. Per-parameter first and second moments plus
/// a per-parameter step count, so parameters can join training late.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: BTreeMap<String, u32>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Apply one update. Every gradient must match an existing parameter
    /// of the same shape, and a non-finite gradient is a hard error: the
    /// run stops rather than poisoning the parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Model(format!("gradient for unknown parameter {name:?}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Numeric(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name:?}"
                )));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let pd = p.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt.step(&mut store, &grads).unwrap();
        // m̂ = g, v̂ = g² after bias correction, so the step is lr·sign(g).
        assert!((store.get("w").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt.step(&mut store, &grads).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap().item() - 0.8).abs() < 1e-5);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("bad", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1);
        let mut grads = GradMap::new();
        grads.insert("bad".to_string(), Tensor::scalar(f32::NAN));
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("bad"), "error should name the parameter");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2]));
        let mut opt = Adam::new(0.1);
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![3]));
        assert!(opt.step(&mut store, &grads).is_err());
    }

    #[test]
    fn iteration_order_is_name_order() {
        let mut store = ParamStore::new();
        store.insert("zeta", Tensor::scalar(0.0));
        store.insert("alpha", Tensor::scalar(0.0));
        store.insert("mid", Tensor::scalar(0.0));
        let names: Vec<&String> = store.names().collect();
        assert_eq!(names, ["alpha", "mid", "zeta"]);
    }
}
