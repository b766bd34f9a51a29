//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use mafn_tensor::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched.
    /// Any non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.numel() != g.len() {
                return Err(Error::Optim(format!(
                    "gradient for {name:?} has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Optim(format!(
                    "non-finite gradient for {name:?} at index {i}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, g) in grads {
            let p = params.get(name)?;
            let mut w = p.data().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w[i] = (w[i] as f64 * decay - update) as f32;
            }
            let shape = p.shape().to_vec();
            params.set(name, Tensor::new(shape, w)?)?;
        }
        Ok(())
    }
}
