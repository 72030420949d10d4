use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment accumulators of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub lr: f32,
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with one learning rate per parameter and a shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts tracking `id` with zero moments.
    pub fn register(&mut self, store: &ParamStore, id: ParamId, lr: f32) {
        let [r, c] = store.get(id).shape();
        self.state.insert(
            id,
            Moments {
                lr,
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
    }

    pub fn set_lr(&mut self, id: ParamId, lr: f32) {
        if let Some(s) = self.state.get_mut(&id) {
            s.lr = lr;
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Rebuilds the moments of a row-structured parameter after its rows were
    /// reordered, duplicated or removed. Row `r` takes the moments of
    /// `sources[r]`; `None` starts it from zero.
    pub fn remap_rows(&mut self, id: ParamId, sources: &[Option<usize>]) {
        let Some(s) = self.state.get_mut(&id) else { return };
        let cols = s.m.cols();
        let mut m = Tensor::zeros(sources.len(), cols);
        let mut v = Tensor::zeros(sources.len(), cols);
        for (r, src) in sources.iter().enumerate() {
            if let Some(src) = *src {
                m.row_slice_mut(r).copy_from_slice(s.m.row_slice(src));
                v.row_slice_mut(r).copy_from_slice(s.v.row_slice(src));
            }
        }
        s.m = m;
        s.v = v;
    }

    /// One bias-corrected update of every registered parameter that has a
    /// gradient entry. The step counter advances exactly once per call.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            if self.state.contains_key(&id) {
                if !g.is_finite() {
                    return Err(TensorError::NonFiniteGradient(store.name(id).to_string()));
                }
                if g.shape() != store.get(id).shape() {
                    return Err(TensorError::Shape {
                        op: "Adam::step",
                        expected: format!("{:?}", store.get(id).shape()),
                        got: format!("{:?}", g.shape()),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.params() {
            let Some(s) = self.state.get_mut(&id) else { continue };
            let p = store.get_mut(id).data_mut();
            let lr = s.lr;
            let m = s.m.data_mut();
            let v = s.v.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
