//! Encoder-decoder generator with per-layer style modulation.
//!
//! The encoder turns the masked image and its mask into a global code `c`
//! and a feature pyramid. The decoder starts from the 4×4 encoder feature and
//! runs modulated convolutions whose per-channel scales come from
//! `A_j([c, ŵ_i])`. Encoder features are added back after a 1×1 projection
//! at every resolution and RGB outputs are accumulated by upsample-and-add.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{ensure_param, Result};
use crate::nn::{self, EqualConv, EqualLinear, ParamStore};
use crate::ops;
use crate::styles::StyleCode;

/// Multi-resolution encoder features, coarsest (4×4) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid(pub Vec<Tensor>);

/// Convolution with per-sample input-channel scaling.
///
/// `weight` is the effective `(out, in, k, k)` kernel, `style` is `(b, in)`.
/// Demodulation rescales every output filter of every sample by
/// `1 / sqrt(sum(w'^2) + 1e-8)` where `w'` is the modulated filter. The
/// computation scales activations instead of weights, which is equal to the
/// grouped per-sample convolution.
pub fn modulated_conv(x: &Tensor, weight: &Tensor, style: &Tensor, demodulate: bool) -> Result<Tensor> {
    let (b, cin, _, _) = x.dims4()?;
    let (_, wcin, _, _) = weight.dims4()?;
    ensure_param!(wcin == cin, "weight expects {wcin} input channels, input has {cin}");
    ensure_param!(style.dims() == [b, cin], "style must be ({b}, {cin}), got {:?}", style.dims());
    let y = ops::conv2d_same(&ops::scale_channels(x, style)?, weight)?;
    if !demodulate {
        return Ok(y);
    }
    let w2 = weight.sqr()?.sum(3)?.sum(2)?; // (out, in)
    let d = (ops::linear_rows(&style.sqr()?, &w2.t()?)? + 1e-8)?.sqrt()?.recip()?;
    ops::scale_channels(&y, &d)
}

/// `I_in ⊙ (1 - M) + I_pred ⊙ M` as an exact per-pixel select.
pub fn composite(i_in: &Tensor, i_pred: &Tensor, mask: &Tensor) -> Result<Tensor> {
    ensure_param!(i_in.dims() == i_pred.dims(), "image shapes differ: {:?} vs {:?}", i_in.dims(), i_pred.dims());
    let (b, _, h, w) = i_in.dims4()?;
    let md = mask.dims();
    ensure_param!(
        md.len() == 4 && md[1] == 1 && md[2] == h && md[3] == w && (md[0] == b || md[0] == 1),
        "mask {md:?} does not match images {:?}",
        i_in.dims()
    );
    let sel = mask.ne(0.0)?.broadcast_as(i_in.shape())?;
    Ok(sel.where_cond(i_pred, i_in)?)
}

#[derive(Clone, Debug)]
struct ModLayer {
    weight: Tensor,
    gain: f64,
    bias: Tensor,
    affine: EqualLinear,
    noise_strength: Option<Tensor>,
    demodulate: bool,
    upsample: bool,
    style_index: usize,
}

impl ModLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        affine_in: usize,
        rgb: bool,
        upsample: bool,
        style_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 1.0, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        let affine = EqualLinear::new(store, &format!("{name}.affine"), affine_in, cin, 1.0, 1.0, rng)?;
        let noise_strength =
            if rgb { None } else { Some(store.constant(&format!("{name}.noise_strength"), &[1], 0.0)?) };
        Ok(Self {
            weight,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            bias,
            affine,
            noise_strength,
            demodulate: !rgb,
            upsample,
            style_index,
        })
    }

    fn forward(&self, x: &Tensor, style: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let x = if self.upsample { ops::upsample2x(x)? } else { x.clone() };
        let w = (&self.weight * self.gain)?;
        let mut y = modulated_conv(&x, &w, style, self.demodulate)?;
        if let Some(strength) = &self.noise_strength {
            let (b, _, h, wd) = y.dims4()?;
            let noise = nn::randn(rng, (b, 1, h, wd), y.dtype())?;
            let noise = noise.broadcast_as(y.shape())?.contiguous()?;
            y = (y + noise.broadcast_mul(&strength.reshape((1, 1, 1, 1))?)?)?;
        }
        y = nn::add_channel_bias(&y, &self.bias)?;
        if self.demodulate {
            y = ops::lrelu(&y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    from_rgb: EqualConv,
    enc_a: Vec<EqualConv>,
    enc_b: Vec<EqualConv>,
    enc_head: EqualConv,
    enc_fc: EqualLinear,
    layers: Vec<ModLayer>,
    skips: Vec<EqualConv>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate().map_err(|e| crate::error::Error::Param(e.to_string()))?;
        let ch = &cfg.channels;
        let levels = ch.len();
        let s = cfg.style_dim;
        let from_rgb = EqualConv::new(store, "g.enc.from_rgb", 4, ch[levels - 1], 1, true, rng)?;
        let mut enc_a = Vec::new();
        let mut enc_b = Vec::new();
        for k in (1..levels).rev() {
            enc_a.push(EqualConv::new(store, &format!("g.enc.l{k}.conv_a"), ch[k], ch[k], 3, true, rng)?);
            enc_b.push(EqualConv::new(store, &format!("g.enc.l{k}.conv_b"), ch[k], ch[k - 1], 3, true, rng)?);
        }
        let enc_head = EqualConv::new(store, "g.enc.l0.conv", ch[0], ch[0], 3, true, rng)?;
        let enc_fc = EqualLinear::new(store, "g.enc.fc", ch[0] * 16, 2 * s, 0.0, 1.0, rng)?;
        let a_in = 3 * s;
        let mut layers = vec![
            ModLayer::new(store, "g.dec.l0.conv", ch[0], ch[0], 3, a_in, false, false, 0, rng)?,
            ModLayer::new(store, "g.dec.l0.to_rgb", ch[0], 3, 1, a_in, true, false, 1, rng)?,
        ];
        let mut skips = Vec::new();
        for k in 1..levels {
            layers.push(ModLayer::new(
                store,
                &format!("g.dec.l{k}.conv_up"),
                ch[k - 1],
                ch[k],
                3,
                a_in,
                false,
                true,
                2 * k - 1,
                rng,
            )?);
            layers.push(ModLayer::new(
                store,
                &format!("g.dec.l{k}.conv"),
                ch[k],
                ch[k],
                3,
                a_in,
                false,
                false,
                2 * k,
                rng,
            )?);
            layers.push(ModLayer::new(
                store,
                &format!("g.dec.l{k}.to_rgb"),
                ch[k],
                3,
                1,
                a_in,
                true,
                false,
                2 * k + 1,
                rng,
            )?);
            skips.push(EqualConv::new(store, &format!("g.dec.l{k}.skip"), ch[k], ch[k], 1, true, rng)?);
        }
        Ok(Self { cfg: cfg.clone(), from_rgb, enc_a, enc_b, enc_head, enc_fc, layers, skips })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_style_layers(&self) -> usize {
        self.cfg.num_layers()
    }

    /// Number of modulated convolutions (each has its own affine map).
    pub fn num_modulated(&self) -> usize {
        self.layers.len()
    }

    fn check_image(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        let r = self.cfg.resolution;
        let d = t.dims();
        ensure_param!(
            d.len() == 4 && d[1] == channels && d[2] == r && d[3] == r,
            "{what} must be (b, {channels}, {r}, {r}), got {d:?}"
        );
        Ok(())
    }

    /// Global code `c` as `(b, 2S)` and the encoder pyramid.
    pub fn encode(&self, i_in: &Tensor, mask: &Tensor) -> Result<(Tensor, FeaturePyramid)> {
        self.check_image(i_in, 3, "input image")?;
        self.check_image(mask, 1, "mask")?;
        let mut x = ops::lrelu(&self.from_rgb.forward(&Tensor::cat(&[i_in, mask], 1)?)?)?;
        let mut feats = Vec::new();
        for (a, b) in self.enc_a.iter().zip(&self.enc_b) {
            x = ops::lrelu(&a.forward(&x)?)?;
            feats.push(x.clone());
            x = ops::lrelu(&b.forward(&ops::downsample2x(&x)?)?)?;
        }
        x = ops::lrelu(&self.enc_head.forward(&x)?)?;
        feats.push(x.clone());
        feats.reverse();
        let bsz = x.dims()[0];
        let c = self.enc_fc.forward(&x.reshape((bsz, self.cfg.channels[0] * 16))?)?;
        Ok((c, FeaturePyramid(feats)))
    }

    /// `v_j = A_j([c, ŵ_i])` for modulated convolution `j`, where `i` is the
    /// style layer that convolution reads.
    pub fn affine_style(&self, c: &Tensor, w_hat_i: &Tensor, j: usize) -> Result<Tensor> {
        ensure_param!(j < self.layers.len(), "modulated layer {j} out of range ({} layers)", self.layers.len());
        self.layers[j].affine.forward(&Tensor::cat(&[c, w_hat_i], 1)?)
    }

    /// Style layer read by modulated convolution `j`.
    pub fn style_index(&self, j: usize) -> Option<usize> {
        self.layers.get(j).map(|l| l.style_index)
    }

    /// Predicted image before compositing.
    pub fn decode(
        &self,
        c: &Tensor,
        w_hat: &StyleCode,
        pyr: &FeaturePyramid,
        noise: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let levels = self.cfg.channels.len();
        ensure_param!(
            w_hat.num_layers() == self.num_style_layers() && w_hat.dim() == self.cfg.style_dim,
            "style code {:?} does not match {} layers of {}",
            w_hat.tensor().dims(),
            self.num_style_layers(),
            self.cfg.style_dim
        );
        ensure_param!(pyr.0.len() == levels, "pyramid has {} levels, expected {levels}", pyr.0.len());
        let b = c.dims()[0];
        let w_hat = if w_hat.batch() == b {
            w_hat.clone()
        } else {
            ensure_param!(w_hat.batch() == 1, "style batch {} does not match {b}", w_hat.batch());
            StyleCode::new(w_hat.tensor().broadcast_as((b, w_hat.num_layers(), w_hat.dim()))?.contiguous()?)?
        };
        let style = |j: usize| -> Result<Tensor> { self.affine_style(c, &w_hat.layer(self.layers[j].style_index)?, j) };
        let mut x = self.layers[0].forward(&pyr.0[0], &style(0)?, noise)?;
        let mut img = self.layers[1].forward(&x, &style(1)?, noise)?;
        for k in 1..levels {
            let base = 3 * k - 1;
            x = self.layers[base].forward(&x, &style(base)?, noise)?;
            x = (x + self.skips[k - 1].forward(&pyr.0[k])?)?;
            x = self.layers[base + 1].forward(&x, &style(base + 1)?, noise)?;
            let rgb = self.layers[base + 2].forward(&x, &style(base + 2)?, noise)?;
            img = (ops::upsample2x(&img)? + rgb)?;
        }
        Ok(img)
    }

    /// Encode, decode with per-pixel noise drawn from `noise_seed`, composite.
    pub fn generate(&self, i_in: &Tensor, mask: &Tensor, w_hat: &StyleCode, noise_seed: u64) -> Result<Tensor> {
        Ok(self.generate_parts(i_in, mask, w_hat, noise_seed)?.1)
    }

    /// `(I_pred, I_out)`.
    pub fn generate_parts(
        &self,
        i_in: &Tensor,
        mask: &Tensor,
        w_hat: &StyleCode,
        noise_seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        let (c, pyr) = self.encode(i_in, mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let pred = self.decode(&c, w_hat, &pyr, &mut rng)?;
        let out = composite(i_in, &pred, mask)?;
        Ok((pred, out))
    }
}

/// Zeroes the hole: `I_gt ⊙ (1 - M)`.
pub fn mask_input(i_gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let zeros = Tensor::zeros(i_gt.shape(), i_gt.dtype(), &Device::Cpu)?;
    composite(i_gt, &zeros, mask)
}

/// Random `(b, S)` latents.
pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, b: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    nn::randn_2d(rng, b, dim, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use candle_core::Var;

    fn small() -> ModelConfig {
        ModelConfig {
            resolution: 16,
            channels: vec![8, 8, 4],
            style_dim: 8,
            mapping_layers: 2,
            disc_channels: vec![8, 8, 4],
            ..ModelConfig::default()
        }
    }

    fn build(dtype: DType, seed: u64) -> (ParamStore, Generator) {
        let mut store = ParamStore::new(dtype, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(&mut store, &small(), &mut rng).unwrap();
        (store, g)
    }

    fn style(rng: &mut ChaCha8Rng, b: usize, dtype: DType) -> StyleCode {
        StyleCode::new(nn::randn_2d(rng, b * 6, 8, dtype).unwrap().reshape((b, 6, 8)).unwrap()).unwrap()
    }

    fn hole(b: usize) -> Tensor {
        let mut v = vec![0f32; b * 256];
        for n in 0..b {
            for y in 4..12 {
                for x in 3..10 {
                    v[n * 256 + y * 16 + x] = 1.0;
                }
            }
        }
        Tensor::from_vec(v, (b, 1, 16, 16), &Device::Cpu).unwrap()
    }

    /// Sets every noise strength to `value`.
    fn set_noise(store: &ParamStore, value: f32) {
        let names: Vec<String> = store.names().filter(|n| n.ends_with("noise_strength")).map(String::from).collect();
        for n in names {
            store.assign(&n, &Tensor::new(&[value], &Device::Cpu).unwrap()).unwrap();
        }
    }

    #[test]
    fn layer_bookkeeping() {
        let (_, g) = build(DType::F32, 0);
        assert_eq!(g.num_style_layers(), 6);
        assert_eq!(g.num_modulated(), 8);
        let idx: Vec<usize> = (0..8).map(|j| g.style_index(j).unwrap()).collect();
        assert_eq!(idx, vec![0, 1, 1, 2, 3, 3, 4, 5]);
    }

    #[test]
    fn encode_is_finite_deterministic_and_mask_sensitive() {
        let (_, g) = build(DType::F32, 1);
        let zero = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let m0 = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let (c, pyr) = g.encode(&zero, &m0).unwrap();
        assert!(ops::to_vec_f64(&c).unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(pyr.0.iter().map(|t| t.dims()[2]).collect::<Vec<_>>(), vec![4, 8, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, (1, 3, 16, 16), DType::F32).unwrap();
        let i_in = mask_input(&x, &hole(1)).unwrap();
        let c1 = ops::to_vec_f32(&g.encode(&i_in, &hole(1)).unwrap().0).unwrap();
        assert_eq!(c1, ops::to_vec_f32(&g.encode(&i_in, &hole(1)).unwrap().0).unwrap());
        let c2 = ops::to_vec_f32(&g.encode(&i_in, &m0).unwrap().0).unwrap();
        assert_ne!(c1, c2);
        assert!(g.encode(&Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap(), &m0).is_err());
    }

    #[test]
    fn affine_style_is_affine() {
        let (store, g) = build(DType::F64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = nn::randn_2d(&mut rng, 1, 16, DType::F64).unwrap();
        let w = nn::randn_2d(&mut rng, 1, 8, DType::F64).unwrap();
        let zc = c.zeros_like().unwrap();
        let zw = w.zeros_like().unwrap();
        let bias = ops::to_vec_f64(store.get("g.dec.l1.conv.affine.bias").unwrap().as_tensor()).unwrap();
        assert_eq!(ops::to_vec_f64(&g.affine_style(&zc, &zw, 3).unwrap()).unwrap(), bias);
        let v0 = ops::to_vec_f64(&g.affine_style(&zc, &zw, 3).unwrap()).unwrap();
        let v1 = ops::to_vec_f64(&g.affine_style(&c, &w, 3).unwrap()).unwrap();
        let v3 = ops::to_vec_f64(&g.affine_style(&(&c * 3.0).unwrap(), &(&w * 3.0).unwrap(), 3).unwrap()).unwrap();
        for k in 0..v0.len() {
            assert!(((v3[k] - v0[k]) - 3.0 * (v1[k] - v0[k])).abs() < 1e-9);
        }
        let wname = "g.dec.l1.conv.affine.weight";
        store.assign(wname, &store.get(wname).unwrap().as_tensor().zeros_like().unwrap()).unwrap();
        assert_eq!(ops::to_vec_f64(&g.affine_style(&c, &w, 3).unwrap()).unwrap(), bias);
        assert!(g.affine_style(&c, &w, 8).is_err());
    }

    #[test]
    fn modulated_conv_reduces_to_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, (2, 3, 6, 6), DType::F64).unwrap();
        let w = randn(&mut rng, (4, 3, 3, 3), DType::F64).unwrap();
        let ones = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let a = ops::to_vec_f64(&modulated_conv(&x, &w, &ones, false).unwrap()).unwrap();
        let b = ops::to_vec_f64(&ops::conv2d_same(&x, &w).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(modulated_conv(&x, &w, &Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap(), false).is_err());
    }

    #[test]
    fn demodulation_matches_grouped_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, (2, 3, 5, 5), DType::F64).unwrap();
        let w = randn(&mut rng, (4, 3, 3, 3), DType::F64).unwrap();
        let s = nn::randn_2d(&mut rng, 2, 3, DType::F64).unwrap();
        let got = modulated_conv(&x, &w, &s, true).unwrap();
        for n in 0..2 {
            let sn = s.narrow(0, n, 1).unwrap().reshape((1, 3, 1, 1)).unwrap();
            let wm = w.broadcast_mul(&sn).unwrap();
            let d = (wm.sqr().unwrap().sum_keepdim(3).unwrap().sum_keepdim(2).unwrap().sum_keepdim(1).unwrap() + 1e-8)
                .unwrap()
                .sqrt()
                .unwrap();
            let wd = wm.broadcast_div(&d).unwrap();
            let want = ops::conv2d_same(&x.narrow(0, n, 1).unwrap(), &wd).unwrap();
            let (p, q) = (ops::to_vec_f64(&got.narrow(0, n, 1).unwrap()).unwrap(), ops::to_vec_f64(&want).unwrap());
            assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn decode_determinism_and_style_sensitivity() {
        let (store, g) = build(DType::F32, 7);
        set_noise(&store, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, (2, 3, 16, 16), DType::F32).unwrap();
        let m = hole(2);
        let i_in = mask_input(&x, &m).unwrap();
        let (w1, w2) = (style(&mut rng, 2, DType::F32), style(&mut rng, 2, DType::F32));
        let (p1, o1) = g.generate_parts(&i_in, &m, &w1, 11).unwrap();
        let (p1b, o1b) = g.generate_parts(&i_in, &m, &w1, 11).unwrap();
        assert_eq!(ops::to_vec_f32(&p1).unwrap(), ops::to_vec_f32(&p1b).unwrap());
        assert_eq!(ops::to_vec_f32(&o1).unwrap(), ops::to_vec_f32(&o1b).unwrap());
        let p2 = g.generate_parts(&i_in, &m, &w2, 11).unwrap().0;
        assert_ne!(ops::to_vec_f32(&p1).unwrap(), ops::to_vec_f32(&p2).unwrap());
        assert!(ops::to_vec_f32(&p1).unwrap().iter().all(|v| v.is_finite()));
        // Another noise seed changes only hole pixels.
        let o3 = ops::to_vec_f32(&g.generate(&i_in, &m, &w1, 12).unwrap()).unwrap();
        let o1 = ops::to_vec_f32(&o1).unwrap();
        let mv = ops::to_vec_f32(&m.broadcast_as((2, 3, 16, 16)).unwrap().contiguous().unwrap()).unwrap();
        let mut inside_diff = false;
        for k in 0..o1.len() {
            if mv[k] == 0.0 {
                assert_eq!(o1[k].to_bits(), o3[k].to_bits());
            } else if o1[k] != o3[k] {
                inside_diff = true;
            }
        }
        assert!(inside_diff);
    }

    #[test]
    fn empty_mask_returns_input_and_gradients_flow() {
        let (store, g) = build(DType::F32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, (1, 3, 16, 16), DType::F32).unwrap();
        let w = style(&mut rng, 1, DType::F32);
        let m0 = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = g.generate(&x, &m0, &w, 0).unwrap();
        assert_eq!(ops::to_vec_f32(&out).unwrap(), ops::to_vec_f32(&x).unwrap());
        let m = hole(1);
        let out = g.generate(&mask_input(&x, &m).unwrap(), &m, &w, 0).unwrap();
        let grads = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let nonzero = store.iter().any(|(_, v)| {
            grads.get(v.as_tensor()).is_some_and(|g| ops::to_vec_f64(g).unwrap().iter().any(|x| *x != 0.0))
        });
        assert!(nonzero);
    }

    #[test]
    fn pyramid_and_style_shape_errors() {
        let (_, g) = build(DType::F32, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, (1, 3, 16, 16), DType::F32).unwrap();
        let (c, pyr) = g.encode(&x, &hole(1)).unwrap();
        let bad_style = StyleCode::new(Tensor::zeros((1, 5, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(g.decode(&c, &bad_style, &pyr, &mut rng).is_err());
        let short = FeaturePyramid(pyr.0[..2].to_vec());
        assert!(g.decode(&c, &style(&mut rng, 1, DType::F32), &short, &mut rng).is_err());
    }

    #[test]
    fn parameter_gradient_through_vars() {
        // Sanity check that weights are trainable handles, not detached copies.
        let (store, g) = build(DType::F32, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Var::from_tensor(&randn(&mut rng, (1, 3, 16, 16), DType::F32).unwrap()).unwrap();
        let (c, _) = g.encode(x.as_tensor(), &hole(1)).unwrap();
        let grads = c.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(store.get("g.enc.fc.weight").unwrap().as_tensor()).is_some());
    }
}
