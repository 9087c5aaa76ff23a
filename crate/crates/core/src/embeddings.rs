//! Frozen embedding networks: style encoder, identity embedder and the
//! perceptual feature extractor. All three share a small convolutional
//! pyramid that first average-pools the image to an analysis resolution.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::config::{FrozenConfig, ModelConfig};
use crate::error::{ensure_param, Result};
use crate::nn::{EqualConv, EqualLinear, ParamStore};
use crate::ops;
use crate::styles::StyleCode;

#[derive(Clone, Debug)]
pub struct ConvPyramid {
    input_resolution: usize,
    analysis_resolution: usize,
    from_rgb: EqualConv,
    convs: Vec<EqualConv>,
    downs: Vec<EqualConv>,
    out_channels: usize,
}

impl ConvPyramid {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_resolution: usize,
        analysis_resolution: usize,
        channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        ensure_param!(!channels.is_empty(), "pyramid needs at least one level");
        ensure_param!(
            analysis_resolution >> (channels.len() - 1) == 4,
            "{} levels do not reach 4x4 from {analysis_resolution}",
            channels.len()
        );
        let from_rgb = EqualConv::new(store, &format!("{prefix}.from_rgb"), 3, channels[0], 1, true, rng)?;
        let mut convs = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            convs.push(EqualConv::new(store, &format!("{prefix}.conv{i}"), c, c, 3, true, rng)?);
            if let Some(&next) = channels.get(i + 1) {
                downs.push(EqualConv::new(store, &format!("{prefix}.down{i}"), c, next, 3, true, rng)?);
            }
        }
        let out_channels = *channels.last().unwrap_or(&0);
        Ok(Self { input_resolution, analysis_resolution, from_rgb, convs, downs, out_channels })
    }

    /// Flattened size of the 4×4 head.
    pub fn head_dim(&self) -> usize {
        self.out_channels * 16
    }

    /// Features at every analysis level, finest first.
    pub fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let dims = img.dims();
        ensure_param!(
            dims.len() == 4 && dims[1] == 3 && dims[2] == self.input_resolution && dims[3] == self.input_resolution,
            "expected (b, 3, {r}, {r}) images, got {dims:?}",
            r = self.input_resolution
        );
        let mut x = img.clone();
        let mut r = self.input_resolution;
        while r > self.analysis_resolution {
            x = ops::downsample2x(&x)?;
            r /= 2;
        }
        x = ops::lrelu(&self.from_rgb.forward(&x)?)?;
        let mut feats = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            x = ops::lrelu(&conv.forward(&x)?)?;
            feats.push(x.clone());
            if let Some(down) = self.downs.get(i) {
                x = ops::lrelu(&down.forward(&ops::downsample2x(&x)?)?)?;
            }
        }
        Ok(feats)
    }

    pub fn head(&self, img: &Tensor) -> Result<Tensor> {
        let last = self.features(img)?.pop().expect("non-empty pyramid");
        let b = last.dims()[0];
        Ok(last.reshape((b, self.head_dim()))?)
    }
}

/// Image to layered style code.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pyramid: ConvPyramid,
    fc: EqualLinear,
    layers: usize,
    dim: usize,
}

impl StyleEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        model: &ModelConfig,
        frozen: &FrozenConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let pyramid =
            ConvPyramid::new(store, "encoder", model.resolution, frozen.analysis_resolution, &frozen.channels, rng)?;
        let (layers, dim) = (model.num_layers(), model.style_dim);
        let fc = EqualLinear::new(store, "encoder.fc", pyramid.head_dim(), layers * dim, 0.0, 1.0, rng)?;
        Ok(Self { pyramid, fc, layers, dim })
    }

    pub fn encode_style(&self, img: &Tensor) -> Result<StyleCode> {
        let h = self.fc.forward(&self.pyramid.head(img)?)?;
        StyleCode::new(h.reshape((img.dims()[0], self.layers, self.dim))?)
    }
}

/// Image to identity embedding.
#[derive(Clone, Debug)]
pub struct IdentityNet {
    pyramid: ConvPyramid,
    fc: EqualLinear,
}

impl IdentityNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        model: &ModelConfig,
        frozen: &FrozenConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let pyramid =
            ConvPyramid::new(store, "identity", model.resolution, frozen.analysis_resolution, &frozen.channels, rng)?;
        let fc = EqualLinear::new(store, "identity.fc", pyramid.head_dim(), frozen.identity_dim, 0.0, 1.0, rng)?;
        Ok(Self { pyramid, fc })
    }

    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        self.fc.forward(&self.pyramid.head(img)?)
    }

    pub fn dim(&self) -> usize {
        self.fc.out_dim()
    }
}

/// Feature pyramid used for the perceptual distance.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    pyramid: ConvPyramid,
}

impl PerceptualNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        model: &ModelConfig,
        frozen: &FrozenConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let pyramid =
            ConvPyramid::new(store, "perceptual", model.resolution, frozen.analysis_resolution, &frozen.channels, rng)?;
        Ok(Self { pyramid })
    }

    pub fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        self.pyramid.features(img)
    }

    /// Per-sample distance `(b,)`: for every level, channel-normalise both
    /// feature maps, sum squared differences over channels and average over
    /// positions; then sum over levels.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (unit_channels(x)? - unit_channels(y)?)?.sqr()?.sum(1)?.mean(2)?.mean(1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("non-empty pyramid"))
    }
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}

/// The three frozen networks with their parameter stores.
#[derive(Clone, Debug)]
pub struct FrozenNets {
    pub encoder_store: ParamStore,
    pub encoder: StyleEncoder,
    pub identity_store: ParamStore,
    pub identity: IdentityNet,
    pub perceptual_store: ParamStore,
    pub perceptual: PerceptualNet,
}

/// Parameter hashes of the frozen networks.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrozenHashes {
    pub encoder: String,
    pub identity: String,
    pub perceptual: String,
}

impl FrozenNets {
    /// Randomly initialised frozen networks.
    pub fn new<R: Rng + ?Sized>(model: &ModelConfig, frozen: &FrozenConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        let mut encoder_store = ParamStore::new(dtype, false);
        let encoder = StyleEncoder::new(&mut encoder_store, model, frozen, rng)?;
        let mut identity_store = ParamStore::new(dtype, false);
        let identity = IdentityNet::new(&mut identity_store, model, frozen, rng)?;
        let mut perceptual_store = ParamStore::new(dtype, false);
        let perceptual = PerceptualNet::new(&mut perceptual_store, model, frozen, rng)?;
        Ok(Self { encoder_store, encoder, identity_store, identity, perceptual_store, perceptual })
    }

    pub fn hashes(&self) -> Result<FrozenHashes> {
        Ok(FrozenHashes {
            encoder: self.encoder_store.hash()?,
            identity: self.identity_store.hash()?,
            perceptual: self.perceptual_store.hash()?,
        })
    }
}

/// Copies every parameter of `from` into the same-named parameter of `to`.
pub fn copy_params(from: &ParamStore, to: &ParamStore) -> Result<()> {
    ensure_param!(from.len() == to.len(), "parameter stores differ in size");
    for (name, var) in from.iter() {
        to.assign(name, var.as_tensor())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfgs() -> (ModelConfig, FrozenConfig) {
        let model = ModelConfig {
            resolution: 16,
            channels: vec![8, 8, 8],
            style_dim: 8,
            disc_channels: vec![8, 8, 8],
            ..ModelConfig::default()
        };
        let frozen =
            FrozenConfig { analysis_resolution: 8, channels: vec![4, 6], identity_dim: 5, ..FrozenConfig::default() };
        (model, frozen)
    }

    #[test]
    fn shapes_and_resolution_check() {
        let (model, frozen) = cfgs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = FrozenNets::new(&model, &frozen, DType::F64, &mut rng).unwrap();
        let x = randn(&mut rng, (2, 3, 16, 16), DType::F64).unwrap();
        assert_eq!(nets.encoder.encode_style(&x).unwrap().tensor().dims(), &[2, 6, 8]);
        assert_eq!(nets.identity.embed(&x).unwrap().dims(), &[2, 5]);
        let f = nets.perceptual.features(&x).unwrap();
        assert_eq!(f.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>(), vec![vec![2, 4, 8, 8], vec![2, 6, 4, 4]]);
        let bad = randn(&mut rng, (1, 3, 8, 8), DType::F64).unwrap();
        assert!(nets.encoder.encode_style(&bad).is_err());
    }

    #[test]
    fn perceptual_distance_properties() {
        let (model, frozen) = cfgs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nets = FrozenNets::new(&model, &frozen, DType::F64, &mut rng).unwrap();
        let a = randn(&mut rng, (2, 3, 16, 16), DType::F64).unwrap();
        let b = randn(&mut rng, (2, 3, 16, 16), DType::F64).unwrap();
        let same = ops::to_vec_f64(&nets.perceptual.distance(&a, &a).unwrap()).unwrap();
        assert!(same.iter().all(|v| *v == 0.0));
        let d = ops::to_vec_f64(&nets.perceptual.distance(&a, &b).unwrap()).unwrap();
        let r = ops::to_vec_f64(&nets.perceptual.distance(&b, &a).unwrap()).unwrap();
        assert!(d.iter().all(|v| *v > 0.0));
        assert!(d.iter().zip(&r).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn gradients_reach_input_but_not_frozen_weights() {
        let (model, frozen) = cfgs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets = FrozenNets::new(&model, &frozen, DType::F64, &mut rng).unwrap();
        let before = nets.hashes().unwrap();
        let x = Var::from_tensor(&randn(&mut rng, (1, 3, 16, 16), DType::F64).unwrap()).unwrap();
        let loss = nets.encoder.encode_style(x.as_tensor()).unwrap().tensor().sqr().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(x.as_tensor()).is_some());
        for (_, var) in nets.encoder_store.iter() {
            assert!(g.get(var.as_tensor()).is_none());
        }
        assert_eq!(before, nets.hashes().unwrap());
    }
}
