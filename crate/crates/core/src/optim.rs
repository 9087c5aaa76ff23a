//! Adam over one or more parameter stores, with serializable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::{ensure_param, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments keyed by `store_index:param_name`.
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn key(store: usize, name: &str) -> String {
        format!("{store}:{name}")
    }

    /// One update of every parameter in `stores` that has a gradient in `grads`.
    pub fn step(&mut self, stores: &[&ParamStore], grads: &GradStore) -> Result<()> {
        self.step_scaled(stores, grads, 1.0)
    }

    /// As [`Adam::step`] with gradients multiplied by `scale`.
    pub fn step_scaled(&mut self, stores: &[&ParamStore], grads: &GradStore, scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (si, store) in stores.iter().enumerate() {
            ensure_param!(store.is_trainable(), "optimizer given a frozen parameter store");
            for (name, var) in store.iter() {
                let Some(g) = grads.get(var.as_tensor()) else { continue };
                let g = if scale == 1.0 { g.clone() } else { (g * scale)? };
                let key = Self::key(si, name);
                let (m, v) = match self.moments.get(&key) {
                    Some((m, v)) => (m.clone(), v.clone()),
                    None => (g.zeros_like()?, g.zeros_like()?),
                };
                let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                let denom = ((&v / c2)?.sqrt()? + self.eps)?;
                let update = ((&m / c1)? / denom)?;
                var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
                self.moments.insert(key, (m, v));
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing: `m/<key>` and `v/<key>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (k, (m, v)) in &self.moments {
            out.push((format!("m/{k}"), m.clone()));
            out.push((format!("v/{k}"), v.clone()));
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (k, m) in tensors {
            if let Some(key) = k.strip_prefix("m/") {
                let v = tensors
                    .get(&format!("v/{key}"))
                    .ok_or_else(|| crate::error::Error::Format(format!("missing second moment for {key}")))?;
                self.moments.insert(key.to_string(), (m.to_dtype(dtype)?, v.to_dtype(dtype)?));
            }
        }
        Ok(())
    }
}
