//! Residual convolutional discriminator and the R1 penalty.
//!
//! The penalty's parameter gradient needs a derivative of an input gradient.
//! Reverse mode here is first order only, so the parameter gradient of
//! `γ/(2B) Σ_b ||g_b||²` with `g = ∇_x Σ D(x)` is taken as a central
//! difference along `g`:
//!
//! `∇_θ P ≈ γ/B · [∇_θ Σ D(x + h g) − ∇_θ Σ D(x − h g)] / (2h)`,
//!
//! which is exact for discriminators linear in their input and second-order
//! accurate otherwise. Piecewise-linear activations add an error wherever the
//! step crosses a kink, so the step is kept small relative to `max |g|`.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{ensure_param, Error, Result};
use crate::nn::{EqualConv, EqualLinear, ParamStore};
use crate::ops;

#[derive(Clone, Debug)]
struct DBlock {
    conv1: EqualConv,
    conv2: EqualConv,
    skip: EqualConv,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    resolution: usize,
    conditional: bool,
    mbstd_group: usize,
    from_rgb: EqualConv,
    blocks: Vec<DBlock>,
    conv: EqualConv,
    fc: EqualLinear,
    out: EqualLinear,
}

/// Largest divisor of `b` that does not exceed `group`.
fn group_size(b: usize, group: usize) -> usize {
    (1..=group.min(b)).rev().find(|g| b.is_multiple_of(*g)).unwrap_or(1)
}

/// Appends one channel holding the mean feature standard deviation over
/// groups of samples (sample `n` belongs to group `n mod (b / G)`).
pub fn minibatch_stddev(x: &Tensor, group: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = group_size(b, group);
    let m = b / g;
    let y = x.reshape((g, m, c, h, w))?;
    let centered = y.broadcast_sub(&y.mean_keepdim(0)?)?;
    let std = (centered.sqr()?.mean(0)? + 1e-8)?.sqrt()?; // (m, c, h, w)
    let s = std.mean(3)?.mean(2)?.mean(1)?; // (m,)
    let s = s.reshape((1, m, 1, 1, 1))?.broadcast_as((g, m, 1, h, w))?.contiguous()?.reshape((b, 1, h, w))?;
    Ok(Tensor::cat(&[x, &s], 1)?)
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate().map_err(|e| Error::Param(e.to_string()))?;
        let ch = &cfg.disc_channels;
        let levels = ch.len();
        let in_ch = if cfg.conditional_disc { 4 } else { 3 };
        let from_rgb = EqualConv::new(store, "d.from_rgb", in_ch, ch[levels - 1], 1, true, rng)?;
        let mut blocks = Vec::new();
        for k in (1..levels).rev() {
            blocks.push(DBlock {
                conv1: EqualConv::new(store, &format!("d.l{k}.conv1"), ch[k], ch[k], 3, true, rng)?,
                conv2: EqualConv::new(store, &format!("d.l{k}.conv2"), ch[k], ch[k - 1], 3, true, rng)?,
                skip: EqualConv::new(store, &format!("d.l{k}.skip"), ch[k], ch[k - 1], 1, false, rng)?,
            });
        }
        let extra = usize::from(cfg.mbstd_group > 0);
        let conv = EqualConv::new(store, "d.l0.conv", ch[0] + extra, ch[0], 3, true, rng)?;
        let fc = EqualLinear::new(store, "d.l0.fc", ch[0] * 16, ch[0], 0.0, 1.0, rng)?;
        let out = EqualLinear::new(store, "d.l0.out", ch[0], 1, 0.0, 1.0, rng)?;
        Ok(Self {
            resolution: cfg.resolution,
            conditional: cfg.conditional_disc,
            mbstd_group: cfg.mbstd_group,
            from_rgb,
            blocks,
            conv,
            fc,
            out,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    /// Realness logits `(b,)`. `mask` is required by the conditional variant and ignored otherwise.
    pub fn discriminate(&self, img: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let r = self.resolution;
        let d = img.dims();
        ensure_param!(
            d.len() == 4 && d[1] == 3 && d[2] == r && d[3] == r,
            "expected (b, 3, {r}, {r}) images, got {d:?}"
        );
        let input = if self.conditional {
            let m = mask.ok_or_else(|| Error::Param("conditional discriminator needs a mask".into()))?;
            Tensor::cat(&[img, m], 1)?
        } else {
            img.clone()
        };
        let mut x = ops::lrelu(&self.from_rgb.forward(&input)?)?;
        for blk in &self.blocks {
            let y = ops::lrelu(&blk.conv1.forward(&x)?)?;
            let y = ops::downsample2x(&ops::lrelu(&blk.conv2.forward(&y)?)?)?;
            let s = blk.skip.forward(&ops::downsample2x(&x)?)?;
            x = ((y + s)? * std::f64::consts::FRAC_1_SQRT_2)?;
        }
        if self.mbstd_group > 0 {
            x = minibatch_stddev(&x, self.mbstd_group)?;
        }
        x = ops::lrelu(&self.conv.forward(&x)?)?;
        let b = x.dims()[0];
        let x = x.reshape((b, x.elem_count() / b))?;
        let x = ops::lrelu(&self.fc.forward(&x)?)?;
        Ok(self.out.forward(&x)?.squeeze(1)?)
    }
}

/// Penalty value and input gradient from [`r1_penalty`].
#[derive(Clone, Debug)]
pub struct R1Value {
    /// `γ/2 · mean_b ||∇_x D(x)_b||²`.
    pub penalty: f64,
    /// `∇_x Σ_b D(x)_b`, detached.
    pub input_grad: Tensor,
}

/// R1 penalty of an arbitrary logit function at real samples `x`.
pub fn r1_penalty<F>(logits: F, x: &Tensor, gamma: f64) -> Result<R1Value>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    ensure_param!(gamma >= 0.0, "gamma must be non-negative, got {gamma}");
    let b = x.dims()[0];
    let var = Var::from_tensor(&x.detach())?;
    let grads = logits(var.as_tensor())?.sum_all()?.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => g.detach(),
        None => x.zeros_like()?,
    };
    let sq = ops::scalar_f64(&g.sqr()?.sum_all()?)?;
    if !sq.is_finite() {
        return Err(Error::Numeric("R1 input gradient is not finite".into()));
    }
    Ok(R1Value { penalty: gamma / 2.0 * sq / b as f64, input_grad: g })
}

/// Surrogate scalar whose parameter gradient approximates `scale · ∇_θ` of
/// the R1 penalty. Its value carries no meaning. Returns `None` when the
/// input gradient vanishes or `gamma · scale` is zero.
pub fn r1_gradient_surrogate<F>(logits: F, x: &Tensor, r1: &R1Value, gamma: f64, scale: f64) -> Result<Option<Tensor>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let g = &r1.input_grad;
    let gmax = ops::to_vec_f64(&g.abs()?.flatten_all()?.max(0)?)?[0];
    if gmax == 0.0 || gamma * scale == 0.0 {
        return Ok(None);
    }
    // Relative step: small enough to rarely cross activation kinks, large
    // enough to stay well above the rounding level of the dtype.
    let rel = if x.dtype() == candle_core::DType::F64 { 1e-6 } else { 1e-2 };
    let h = rel / gmax;
    let x = x.detach();
    let step = (g * h)?;
    let plus = logits(&(&x + &step)?)?.sum_all()?;
    let minus = logits(&(&x - &step)?)?.sum_all()?;
    let coef = gamma * scale / (x.dims()[0] as f64 * 2.0 * h);
    Ok(Some(((plus - minus)? * coef)?))
}

/// Penalty value and its parameter gradients for `disc`.
pub fn r1_with_grads(
    disc: &Discriminator,
    x: &Tensor,
    mask: Option<&Tensor>,
    gamma: f64,
    scale: f64,
) -> Result<(f64, Option<GradStore>)> {
    let f = |t: &Tensor| disc.discriminate(t, mask);
    let r1 = r1_penalty(f, x, gamma)?;
    let grads = match r1_gradient_surrogate(f, x, &r1, gamma, scale)? {
        Some(s) => Some(s.backward()?),
        None => None,
    };
    Ok((r1.penalty, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mbstd: usize) -> ModelConfig {
        ModelConfig {
            resolution: 16,
            channels: vec![8, 8, 4],
            style_dim: 8,
            disc_channels: vec![8, 6, 4],
            mbstd_group: mbstd,
            ..ModelConfig::default()
        }
    }

    fn build(mbstd: usize, dtype: DType, seed: u64) -> (ParamStore, Discriminator) {
        let mut store = ParamStore::new(dtype, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Discriminator::new(&mut store, &cfg(mbstd), &mut rng).unwrap();
        (store, d)
    }

    #[test]
    fn group_sizes() {
        assert_eq!(group_size(8, 4), 4);
        assert_eq!(group_size(6, 4), 3);
        assert_eq!(group_size(5, 4), 1);
        assert_eq!(group_size(2, 4), 2);
    }

    #[test]
    fn minibatch_stddev_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, (4, 2, 2, 2), DType::F64).unwrap();
        let y = minibatch_stddev(&x, 2).unwrap();
        let v = ops::to_vec_f64(&x).unwrap();
        let out = ops::to_vec_f64(&y).unwrap();
        for n in 0..4 {
            let partner = (n + 2) % 4;
            let mut acc = 0.0;
            for k in 0..8 {
                let (a, b) = (v[n * 8 + k], v[partner * 8 + k]);
                acc += (((a - b) / 2.0).powi(2) + 1e-8).sqrt();
            }
            let extra = out[n * 12 + 8];
            assert!((extra - acc / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_are_deterministic_finite_and_batch_consistent() {
        let (_, d) = build(0, DType::F64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, (3, 3, 16, 16), DType::F64).unwrap();
        let l = ops::to_vec_f64(&d.discriminate(&x, None).unwrap()).unwrap();
        assert_eq!(l, ops::to_vec_f64(&d.discriminate(&x, None).unwrap()).unwrap());
        assert!(l.iter().all(|v| v.is_finite() && v.abs() < 100.0));
        for n in 0..3 {
            let s = ops::to_vec_f64(&d.discriminate(&x.narrow(0, n, 1).unwrap(), None).unwrap()).unwrap();
            assert!((s[0] - l[n]).abs() < 1e-12);
        }
        assert!(d.discriminate(&randn(&mut rng, (1, 3, 8, 8), DType::F64).unwrap(), None).is_err());
    }

    #[test]
    fn conditional_variant_needs_mask() {
        let mut c = cfg(4);
        c.conditional_disc = true;
        let mut store = ParamStore::new(DType::F32, true);
        let d = Discriminator::new(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(d.discriminate(&x, None).is_err());
        let m = Tensor::ones((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.discriminate(&x, Some(&m)).unwrap().dims(), &[2]);
    }

    #[test]
    fn r1_closed_form_for_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, (1, 3, 4, 4), DType::F64).unwrap();
        let x = randn(&mut rng, (5, 3, 4, 4), DType::F64).unwrap();
        let f = |t: &Tensor| -> Result<Tensor> { Ok(t.broadcast_mul(&a)?.flatten_from(1)?.sum(1)?) };
        let a2 = ops::scalar_f64(&a.sqr().unwrap().sum_all().unwrap()).unwrap();
        for gamma in [0.0, 1.0, 10.0] {
            let r = r1_penalty(f, &x, gamma).unwrap();
            assert!((r.penalty - gamma / 2.0 * a2).abs() < 1e-9 * a2.max(1.0));
        }
        // Shifting the output by a constant leaves the penalty unchanged.
        let shifted = |t: &Tensor| -> Result<Tensor> { Ok((f(t)? + 3.5)?) };
        assert_eq!(r1_penalty(f, &x, 10.0).unwrap().penalty, r1_penalty(shifted, &x, 10.0).unwrap().penalty);
        assert!(r1_penalty(f, &x, -1.0).is_err());
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let (store, d) = build(0, DType::F64, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, (2, 3, 16, 16), DType::F64).unwrap();
        let gamma = 10.0;
        let (_, grads) = r1_with_grads(&d, &x, None, gamma, 1.0).unwrap();
        let grads = grads.unwrap();
        for name in ["d.l0.out.weight", "d.l2.conv1.weight", "d.from_rgb.bias"] {
            let var = store.get(name).unwrap();
            let base = var.as_tensor().copy().unwrap();
            let analytic = ops::to_vec_f64(grads.get(var.as_tensor()).unwrap()).unwrap();
            let flat = ops::to_vec_f64(&base).unwrap();
            for idx in [0, flat.len() / 2, flat.len() - 1] {
                let eps = 1e-5;
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, base.shape(), &Device::Cpu).unwrap()).unwrap();
                    r1_penalty(|t: &Tensor| d.discriminate(t, None), &x, gamma).unwrap().penalty
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                var.set(&base).unwrap();
                let tol = 1e-4 * fd.abs().max(1e-3);
                assert!((analytic[idx] - fd).abs() < tol, "{name}[{idx}]: {} vs {fd}", analytic[idx]);
            }
        }
    }

    #[test]
    fn penalty_only_optimisation_decreases_penalty() {
        let (store, d) = build(4, DType::F32, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, (4, 3, 16, 16), DType::F32).unwrap();
        let mut opt = crate::optim::Adam::new(0.002, 0.5, 0.99);
        let first = r1_with_grads(&d, &x, None, 10.0, 1.0).unwrap().0;
        assert!(first.is_finite() && first > 0.0);
        let mut last = first;
        for _ in 0..40 {
            let (p, g) = r1_with_grads(&d, &x, None, 10.0, 1.0).unwrap();
            last = p;
            opt.step(&[&store], &g.unwrap()).unwrap();
        }
        assert!(last < first * 0.9, "{first} -> {last}");
    }
}
