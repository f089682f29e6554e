//! Adaptive moment estimation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::Gradients;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

/// Serializable optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient and
    /// is listed in `allowed` (all when `None`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, allowed: Option<&[ParamId]>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(self.beta1, t);
        let bc2 = 1.0 - math::powf(self.beta2, t);
        for (id, g) in grads.params() {
            if !store.is_trainable(id) || allowed.is_some_and(|a| !a.contains(&id)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = store.value_mut(id);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        AdamState {
            step: self.step,
            moments: self.moments.iter().map(|(id, (m, v))| (store.name(*id).into(), m.clone(), v.clone())).collect(),
        }
    }

    pub fn load_state(&mut self, store: &ParamStore, state: &AdamState) -> Result<()> {
        self.step = state.step;
        self.moments.clear();
        for (name, m, v) in &state.moments {
            let Some(id) = store.find(name) else {
                bail!(Validation, "optimizer state for unknown parameter {}", name);
            };
            self.moments.insert(id, (m.clone(), v.clone()));
        }
        Ok(())
    }
}
