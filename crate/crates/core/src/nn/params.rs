//! Named parameter storage with gradient buffers and the Adam optimizer.

use super::array::NdArray;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Index of a parameter inside a [`ParamStore`]; stable for the store's life.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: NdArray,
    grad: NdArray,
    m: NdArray,
    v: NdArray,
}

/// All trainable parameters of a model, in insertion order.
///
/// Insertion order is the canonical order for checkpoint serialization and
/// gradient reduction, which keeps every artifact byte-stable for a fixed
/// construction sequence.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

/// Adam hyperparameters (bias-corrected first/second moments).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: NdArray) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Parameter {
                name: name.to_string(),
                details: "registered twice".to_string(),
            });
        }
        let id = ParamId(self.entries.len());
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: NdArray::zeros(&shape),
            m: NdArray::zeros(&shape),
            v: NdArray::zeros(&shape),
        });
        self.by_name.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            details: "not found".to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].grad
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Accumulate `scale * grad` into a parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &NdArray, scale: f64) {
        self.entries[id.0].grad.add_scaled(grad, scale);
    }

    pub fn optimizer_step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter from the accumulated gradients.
    ///
    /// Uses bias-corrected moment estimates, zeroes the gradient buffers
    /// afterwards, and increments the step counter. A non-finite gradient
    /// aborts with an error naming the offending parameter before any
    /// parameter is touched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for e in &self.entries {
            if !e.grad.all_finite() {
                return Err(Error::NonFinite { what: "gradient", name: e.name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.iter_mut() {
            let g = e.grad.data();
            let m = e.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.iter()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = e.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let value = e.value.data_mut();
            for i in 0..value.len() {
                let m_hat = e.m.data()[i] / bc1;
                let v_hat = e.v.data()[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            e.grad.data_mut().fill(0.0);
        }
        Ok(())
    }

    /// Iterate `(name, value)` pairs in insertion order (checkpointing).
    pub fn entries(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrite a parameter's value; the shape must match.
    pub fn load_value(&mut self, name: &str, value: NdArray) -> Result<()> {
        let id = self.id(name)?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                details: format!(
                    "checkpoint shape {:?} does not match model shape {:?}",
                    value.shape(),
                    e.value.shape()
                ),
            });
        }
        e.value = value;
        Ok(())
    }
}
