//! Parameter storage and the equalized-learning-rate layers used by every
//! network in the crate.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{ensure_param, param_err, Result};
use crate::ops;

/// Named parameters of one network, kept in name order so that hashing and
/// checkpointing are deterministic.
///
/// A frozen store hands out detached tensors: gradients still flow through
/// the layers to their inputs, but never accumulate on the parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    trainable: bool,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, trainable: bool) -> Self {
        Self { dtype, trainable, params: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn handle(&self, var: &Var) -> Tensor {
        if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        ensure_param!(!self.params.contains_key(name), "duplicate parameter name {name}");
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let h = self.handle(&var);
        self.params.insert(name.to_string(), var);
        Ok(h)
    }

    /// Standard-normal initialisation scaled by `std`.
    pub fn normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; layers holding it observe the new value.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.params.get(name).ok_or_else(|| param_err!("unknown parameter {name}"))?;
        ensure_param!(var.dims() == value.dims(), "shape mismatch for {name}: {:?} vs {:?}", var.dims(), value.dims());
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in ops::to_vec_f32(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Fully connected layer with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct EqualLinear {
    weight: Tensor,
    bias: Tensor,
    weight_gain: f64,
    bias_gain: f64,
}

impl EqualLinear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: f32,
        lr_mul: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_dim, in_dim], 1.0 / lr_mul, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], bias_init / lr_mul as f32)?;
        Ok(Self { weight, bias, weight_gain: lr_mul / (in_dim as f64).sqrt(), bias_gain: lr_mul })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Effective weight `(out, in)` after gain.
    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok((&self.weight * self.weight_gain)?)
    }

    pub fn effective_bias(&self) -> Result<Tensor> {
        Ok((&self.bias * self.bias_gain)?)
    }

    /// `x` is `(n, in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.effective_weight()?.t()?;
        let y = ops::linear_rows(x, &wt)?;
        Ok(y.broadcast_add(&self.effective_bias()?)?)
    }
}

/// Stride-1 same-padded convolution with runtime weight scaling.
#[derive(Clone, Debug)]
pub struct EqualConv {
    weight: Tensor,
    bias: Option<Tensor>,
    gain: f64,
}

impl EqualConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0, rng)?;
        let bias = if bias { Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?) } else { None };
        Ok(Self { weight, bias, gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt() })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d_same(x, &(&self.weight * self.gain)?)?;
        match &self.bias {
            Some(b) => ops::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    ops::add_channel_bias(x, bias)
}

/// Draws a `(b, c, h, w)` standard-normal tensor from `rng`.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn randn_2d<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_store_parameters_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64, false);
        let lin = EqualLinear::new(&mut store, "fc", 3, 2, 0.0, 1.0, &mut rng).unwrap();
        let x = Var::from_tensor(&Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let y = lin.forward(x.as_tensor()).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        assert!(g.get(x.as_tensor()).is_some());
        assert!(g.get(store.get("fc.weight").unwrap().as_tensor()).is_none());
    }

    #[test]
    fn assign_updates_layer_view_and_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32, true);
        let lin = EqualLinear::new(&mut store, "fc", 2, 2, 1.0, 1.0, &mut rng).unwrap();
        let before = store.hash().unwrap();
        let x = Tensor::zeros((1, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ops::to_vec_f32(&lin.forward(&x).unwrap()).unwrap(), vec![1.0, 1.0]);
        store.assign("fc.bias", &Tensor::new(&[2.0f32, 3.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(ops::to_vec_f32(&lin.forward(&x).unwrap()).unwrap(), vec![2.0, 3.0]);
        assert_ne!(before, store.hash().unwrap());
        assert!(store.assign("fc.bias", &Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
