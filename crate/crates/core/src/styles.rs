//! Style codes, the mapping network and layerwise style mixing.
//!
//! A style code is a `(b, L, S)` tensor: `L` style layers of `S` values per
//! sample. Codes from the mapping network are replicated across layers; codes
//! from the style encoder are not.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{ensure_param, param_err, Error, Result};
use crate::nn::{EqualLinear, ParamStore};
use crate::ops;

/// Layered style code of shape `(b, L, S)`.
#[derive(Clone, Debug)]
pub struct StyleCode(Tensor);

impl StyleCode {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure_param!(t.rank() == 3, "style code must be (b, L, S), got {:?}", t.dims());
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[2]
    }

    /// Layer `i` (0-based) as `(b, S)`.
    pub fn layer(&self, i: usize) -> Result<Tensor> {
        ensure_param!(i < self.num_layers(), "style layer {i} out of range for {} layers", self.num_layers());
        Ok(self.0.narrow(1, i, 1)?.squeeze(1)?)
    }

    /// Replicates `(b, S)` into `L` identical layers.
    pub fn broadcast(w: &Tensor, layers: usize) -> Result<Self> {
        let (b, s) = w.dims2()?;
        Self::new(w.unsqueeze(1)?.broadcast_as((b, layers, s))?.contiguous()?)
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        ops::to_vec_f32(&self.0)
    }

    /// `STYL` container: magic, version, batch, layers, dim (u32 LE), then f32 LE values.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"STYL")?;
        for v in [1u32, self.batch() as u32, self.num_layers() as u32, self.dim() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.to_vec()? {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"STYL" {
            return Err(Error::Format("not a style code container".into()));
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            let mut word = [0u8; 4];
            input.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        if header[0] != 1 {
            return Err(Error::Format(format!("unsupported style code version {}", header[0])));
        }
        let (b, l, s) = (header[1] as usize, header[2] as usize, header[3] as usize);
        let mut data = Vec::with_capacity(b * l * s);
        for _ in 0..b * l * s {
            let mut word = [0u8; 4];
            input.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word));
        }
        Self::new(Tensor::from_vec(data, (b, l, s), &Device::Cpu)?)
    }
}

/// Binary per-layer selector: `true` takes the exemplar layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MixSelector(Vec<bool>);

impl MixSelector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn ones(layers: usize) -> Self {
        Self(vec![true; layers])
    }

    pub fn zeros(layers: usize) -> Self {
        Self(vec![false; layers])
    }

    /// Four stochastic coarse layers followed by exemplar layers.
    pub fn default_for(layers: usize) -> Self {
        Self((0..layers).map(|i| i >= 4.min(layers.saturating_sub(1))).collect())
    }

    /// Ones on the 1-based inclusive range `i..=j`.
    pub fn from_range(layers: usize, i: usize, j: usize) -> Result<Self> {
        ensure_param!(1 <= i && i <= j && j <= layers, "invalid layer range {i}..={j} for {layers} layers");
        Ok(Self((1..=layers).map(|k| k >= i && k <= j).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    fn tensor(&self) -> Result<Tensor> {
        let v: Vec<u8> = self.0.iter().map(|b| *b as u8).collect();
        Ok(Tensor::from_vec(v, (1, self.0.len(), 1), &Device::Cpu)?)
    }
}

impl fmt::Display for MixSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for MixSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(param_err!("invalid selector character {other:?}")),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// Layerwise selection: exemplar layer `w_i` where `phi_i = 1`, stochastic `w̃_i` otherwise.
pub fn mix_styles(w: &StyleCode, w_tilde: &StyleCode, phi: &MixSelector) -> Result<StyleCode> {
    ensure_param!(
        w.num_layers() == phi.len() && w_tilde.num_layers() == phi.len(),
        "layer count mismatch: {} / {} / selector {}",
        w.num_layers(),
        w_tilde.num_layers(),
        phi.len()
    );
    ensure_param!(w.dim() == w_tilde.dim(), "style dims differ: {} vs {}", w.dim(), w_tilde.dim());
    let b = w.batch().max(w_tilde.batch());
    let shape = (b, phi.len(), w.dim());
    let a = w.0.broadcast_as(shape)?;
    let c = w_tilde.0.broadcast_as(shape)?;
    let sel = phi.tensor()?.broadcast_as(shape)?;
    StyleCode::new(sel.where_cond(&a, &c)?)
}

/// Layers `i..=j` (1-based) from `w2`, the rest from `w1`.
pub fn crossover_mix(w1: &StyleCode, w2: &StyleCode, i: usize, j: usize) -> Result<StyleCode> {
    let phi = MixSelector::from_range(w1.num_layers(), i, j)?;
    mix_styles(w2, w1, &phi)
}

/// `w_avg + psi (w̃ - w_avg)` layerwise.
pub fn truncate(w_tilde: &StyleCode, w_avg: &StyleCode, psi: f64) -> Result<StyleCode> {
    ensure_param!((0.0..=1.0).contains(&psi), "truncation psi must lie in [0, 1], got {psi}");
    if psi == 1.0 {
        return Ok(w_tilde.clone());
    }
    let avg = w_avg.0.broadcast_as(w_tilde.0.shape())?;
    StyleCode::new((&avg + ((&w_tilde.0 - &avg)? * psi)?)?)
}

/// Eight-layer (by default) MLP from latents to the intermediate style space.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    layers: Vec<EqualLinear>,
    num_layers: usize,
    dim: usize,
}

impl MappingNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        depth: usize,
        lr_mul: f64,
        style_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EqualLinear::new(store, &format!("mapping.fc{i}"), dim, dim, 0.0, lr_mul, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, num_layers: style_layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(b, S)` latents to `(b, S)` styles. Latents are rescaled to unit RMS first.
    pub fn map_single(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        ensure_param!(d == self.dim, "latent has {d} values, expected {}", self.dim);
        if ops::to_vec_f64(z)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        let norm = (z.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
        let mut x = z.broadcast_div(&norm)?;
        for layer in &self.layers {
            x = ops::lrelu(&layer.forward(&x)?)?;
        }
        Ok(x)
    }

    pub fn map_latent(&self, z: &Tensor) -> Result<StyleCode> {
        StyleCode::broadcast(&self.map_single(z)?, self.num_layers)
    }
}

/// Draws whether a sample uses two latents and, if so, the crossover layer in `[1, L)`.
pub fn sample_crossover<R: Rng + ?Sized>(rng: &mut R, p: f64, layers: usize) -> Option<usize> {
    if layers >= 2 && rng.random::<f64>() < p {
        Some(rng.random_range(1..layers))
    } else {
        None
    }
}

/// Mixing regularization for a batch: each sample independently crosses the
/// codes of `z1` and `z2` with probability `p`. Returns the code and the
/// per-sample crossover layer.
pub fn mixing_regularization<R: Rng + ?Sized>(
    z1: &Tensor,
    z2: &Tensor,
    rng: &mut R,
    p: f64,
    mapping: &MappingNetwork,
) -> Result<(StyleCode, Vec<Option<usize>>)> {
    ensure_param!((0.0..=1.0).contains(&p), "mixing probability must lie in [0, 1], got {p}");
    let b = z1.dims2()?.0;
    let layers = mapping.num_layers;
    let cuts: Vec<Option<usize>> = (0..b).map(|_| sample_crossover(rng, p, layers)).collect();
    let w1 = mapping.map_latent(z1)?;
    if cuts.iter().all(|c| c.is_none()) {
        return Ok((w1, cuts));
    }
    let w2 = mapping.map_latent(z2)?;
    let sel: Vec<u8> =
        cuts.iter().flat_map(|c| (0..layers).map(move |i| matches!(c, Some(k) if i >= *k) as u8)).collect();
    let sel = Tensor::from_vec(sel, (b, layers, 1), &Device::Cpu)?.broadcast_as(w1.0.shape())?;
    Ok((StyleCode::new(sel.where_cond(&w2.0, &w1.0)?)?, cuts))
}

/// Exponential moving average of mapped latents.
#[derive(Clone, Debug)]
pub struct StyleAverage {
    value: Vec<f32>,
    decay: f64,
}

impl StyleAverage {
    pub fn new(dim: usize, decay: f64) -> Self {
        Self { value: vec![0.0; dim], decay }
    }

    pub fn from_values(value: Vec<f32>, decay: f64) -> Self {
        Self { value, decay }
    }

    pub fn values(&self) -> &[f32] {
        &self.value
    }

    /// `avg <- decay * avg + (1 - decay) * mean_b(w)` for `(b, S)` styles.
    pub fn update(&mut self, w: &Tensor) -> Result<()> {
        let mean = ops::to_vec_f64(&w.detach().mean(0)?)?;
        ensure_param!(mean.len() == self.value.len(), "style average dimension mismatch");
        for (a, m) in self.value.iter_mut().zip(mean) {
            *a = (self.decay * *a as f64 + (1.0 - self.decay) * m) as f32;
        }
        Ok(())
    }

    pub fn as_code(&self, layers: usize, dtype: DType) -> Result<StyleCode> {
        let t = Tensor::from_vec(self.value.clone(), (1, self.value.len()), &Device::Cpu)?.to_dtype(dtype)?;
        StyleCode::broadcast(&t, layers)
    }
}
