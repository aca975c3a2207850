//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const MOMENT_PREFIX_M: &str = "opt.m.";
pub const MOMENT_PREFIX_V: &str = "opt.v.";

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient still get the decay.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                _ => return Err(Error::invalid(format!("gradient for unknown or mis-shaped parameter {name}"))),
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            for x in p.data_mut() {
                *x *= shrink;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as extra checkpoint tensors.
    pub fn export(&self, out: &mut ParamStore<f32>) {
        for (k, t) in &self.m {
            out.insert(format!("{MOMENT_PREFIX_M}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{MOMENT_PREFIX_V}{k}"), t.clone());
        }
    }

    /// Restores moments from a checkpoint store written after `step` updates.
    pub fn import(&mut self, store: &ParamStore<f32>, step: u64) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in store.iter() {
            if let Some(name) = k.strip_prefix(MOMENT_PREFIX_M) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(MOMENT_PREFIX_V) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}
