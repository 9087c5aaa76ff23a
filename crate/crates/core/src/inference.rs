//! Single-shot inpainting with a trained model.
//!
//! The stochastic style code is drawn from `seed` (stream 1), truncated towards
//! the running average by `psi`, and mixed with the exemplar code under `phi`.
//! The generator's per-pixel noise is drawn from the same `seed`.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_param, Result};
use crate::generator::{mask_input, sample_latents};
use crate::styles::{crossover_mix, mix_styles, truncate, MixSelector, StyleCode};
use crate::training::{Model, DTYPE};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOptions {
    pub phi: MixSelector,
    pub psi: f64,
    pub seed: u64,
}

impl InferenceOptions {
    /// The model's training selector, no truncation, seed 0.
    pub fn for_model(model: &Model) -> Self {
        Self { phi: model.config.train.phi.clone(), psi: 1.0, seed: 0 }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let layers = model.config.model.num_layers();
        ensure_param!(self.phi.len() == layers, "selector has {} layers, model has {layers}", self.phi.len());
        ensure_param!((0.0..=1.0).contains(&self.psi), "psi must lie in [0, 1], got {}", self.psi);
        Ok(())
    }
}

/// Truncated stochastic code for a batch of `b`.
pub fn random_style(model: &Model, b: usize, seed: u64, psi: f64) -> Result<StyleCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let z = sample_latents(&mut rng, b, model.config.model.style_dim, DTYPE)?;
    let w = model.mapping.map_latent(&z)?;
    let avg = model.w_avg.as_code(model.config.model.num_layers(), DTYPE)?;
    truncate(&w, &avg, psi)
}

fn check_inputs(model: &Model, image: &Tensor, mask: &Tensor, exemplar: &Tensor) -> Result<()> {
    let r = model.config.model.resolution;
    let (b, c, h, w) = image.dims4()?;
    ensure_param!(c == 3 && h == r && w == r, "image must be (b, 3, {r}, {r}), got {:?}", image.dims());
    ensure_param!(mask.dims() == [b, 1, r, r], "mask must be ({b}, 1, {r}, {r}), got {:?}", mask.dims());
    ensure_param!(exemplar.dims() == [b, 3, r, r], "exemplar must be ({b}, 3, {r}, {r}), got {:?}", exemplar.dims());
    Ok(())
}

/// Inpaints with an explicit exemplar code.
pub fn inpaint_with_code(
    model: &Model,
    image: &Tensor,
    mask: &Tensor,
    w_ex: &StyleCode,
    opts: &InferenceOptions,
) -> Result<Tensor> {
    opts.validate(model)?;
    let b = image.dims4()?.0;
    let w_rand = random_style(model, b, opts.seed, opts.psi)?;
    let w_hat = mix_styles(w_ex, &w_rand, &opts.phi)?;
    let i_in = mask_input(image, mask)?;
    model.generator.generate(&i_in, mask, &w_hat, opts.seed)
}

/// Fills `mask` (1 = hole) of `image` with attributes of `exemplar`. Pixels
/// outside the hole are copied from `image` unchanged.
pub fn inpaint(
    model: &Model,
    image: &Tensor,
    mask: &Tensor,
    exemplar: &Tensor,
    opts: &InferenceOptions,
) -> Result<Tensor> {
    check_inputs(model, image, mask, exemplar)?;
    let w_ex = model.encode_style(exemplar)?;
    inpaint_with_code(model, image, mask, &w_ex, opts)
}

/// Style-mixing inpainting: layers `i..=j` (1-based) of the exemplar code come
/// from `exemplar2`, the rest from `exemplar1`. With `(1, L)` this equals
/// [`inpaint`] with `exemplar2`.
pub fn inpaint_mix(
    model: &Model,
    image: &Tensor,
    mask: &Tensor,
    exemplar1: &Tensor,
    exemplar2: &Tensor,
    range: (usize, usize),
    opts: &InferenceOptions,
) -> Result<Tensor> {
    check_inputs(model, image, mask, exemplar1)?;
    check_inputs(model, image, mask, exemplar2)?;
    let w1 = model.encode_style(exemplar1)?;
    let w2 = model.encode_style(exemplar2)?;
    let w_ex = crossover_mix(&w1, &w2, range.0, range.1)?;
    inpaint_with_code(model, image, mask, &w_ex, opts)
}

impl crate::evaluation::Inpainter for Model {
    fn inpaint(&self, image: &Tensor, mask: &Tensor, exemplar: &Tensor, seed: u64) -> Result<Tensor> {
        let opts = InferenceOptions { seed, ..InferenceOptions::for_model(self) };
        inpaint(self, image, mask, exemplar, &opts)
    }
}
