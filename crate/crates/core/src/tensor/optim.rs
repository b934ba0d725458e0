//! Named parameter storage and the AdamW optimizer.
//!
//! Parameters live in a [`ParamStore`], keyed by slash-separated names
//! (`eapp/enc1.w`). Training stages freeze and thaw whole prefixes; the
//! optimizer walks entries in insertion order, so updates are deterministic.

use super::{Tensor, TensorError};
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("parameter {0:?} has no gradient; run backward before stepping")]
    MissingGrad(String),
    #[error("unknown parameter {0:?}")]
    UnknownName(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
    has_grad: bool,
    trainable: bool,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, OptimError> {
        if self.by_name.contains_key(name) {
            return Err(OptimError::DuplicateName(name.to_string()));
        }
        let n = value.numel();
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            has_grad: false,
            trainable: true,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), OptimError> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.value.shape() {
            return Err(OptimError::Tensor(TensorError::ShapeMismatch {
                op: "set_value",
                a: e.value.shape().to_vec(),
                b: value.shape().to_vec(),
            }));
        }
        e.value = value;
        Ok(())
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f32]) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), g.len());
        for (dst, src) in e.grad.iter_mut().zip(g) {
            *dst += src;
        }
        e.has_grad = true;
    }

    pub fn mark_has_grad(&mut self, id: ParamId) {
        self.entries[id.0].has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.has_grad = false;
        }
    }

    /// Order-insensitive content hash of all parameters under a prefix; used
    /// to verify freeze contracts.
    pub fn param_hash(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                e.name.hash(&mut h);
                for &v in e.value.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// (name, tensor) pairs in insertion order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

/// Per-tape cache of parameter leaf ids. A parameter registered twice on
/// one tape would double-count its gradient; routing every lookup through
/// this cache guarantees a single leaf per parameter per tape.
#[derive(Default)]
pub struct ParamLeaves {
    map: HashMap<ParamId, super::TensorId>,
}

impl ParamLeaves {
    pub fn new() -> Self {
        ParamLeaves::default()
    }

    pub fn get(
        &mut self,
        tape: &mut super::Tape,
        store: &ParamStore,
        pid: ParamId,
    ) -> super::TensorId {
        *self.map.entry(pid).or_insert_with(|| tape.param(store, pid))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step_count: u64,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, step_count: 0 }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_betas(mut self, b1: f32, b2: f32) -> Self {
        self.beta1 = b1;
        self.beta2 = b2;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter. Errors if any
    /// trainable parameter has not received a gradient since `zero_grad`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), OptimError> {
        for e in &store.entries {
            if e.trainable && !e.has_grad {
                return Err(OptimError::MissingGrad(e.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for e in &mut store.entries {
            if !e.trainable {
                continue;
            }
            let data = e.value.data_mut();
            for i in 0..data.len() {
                let g = e.grad[i];
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}
