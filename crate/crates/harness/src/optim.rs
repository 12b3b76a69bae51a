//! Adam with L2 weight decay added to the gradient.

use std::collections::HashMap;

use anyhow::{bail, Result};
use lss_tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
        }
    }
}

/// Per-parameter first and second moments, kept in f64.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every named parameter.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let p = store.value_mut(name)?;
            if p.shape() != g.shape() {
                bail!("adam: gradient {:?} for parameter `{name}` of shape {:?}", g.shape(), p.shape());
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            if m.len() != g.numel() {
                bail!("adam: state for `{name}` has {} entries, parameter has {}", m.len(), g.numel());
            }
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let w = *pi as f64;
                let gi = gi as f64 + c.weight_decay * w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *pi = (w - update) as f32;
            }
        }
        Ok(())
    }
}
