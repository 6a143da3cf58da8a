use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::expr::Bindings;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. `weight_decay` is applied decoupled from the
/// gradient moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named trainable tensors with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn bindings(&self) -> Bindings<'_> {
        self.iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Adds every parameter to an existing binding set.
    pub fn bind_into<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (k, v) in self.iter() {
            bindings.bind(k, v);
        }
    }

    /// Copies parameter values (not optimizer state).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor>) {
        for (k, v) in snapshot {
            if let Some(p) = self.params.get_mut(k) {
                p.value = v.clone();
            }
        }
    }

    /// One bias-corrected Adam update. `grads` must hold exactly one entry per
    /// parameter with a matching shape.
    pub fn adam_step(&mut self, grads: &HashMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Usage(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Usage(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Usage(format!("gradient for unknown parameter `{extra}`")));
        }
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let m = p.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.second_moment.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}
