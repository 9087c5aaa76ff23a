//! Adversarial, identity, perceptual and attribute losses.

use candle_core::{Device, Tensor};

use crate::config::LossWeights;
use crate::embeddings::{IdentityNet, PerceptualNet, StyleEncoder};
use crate::error::{ensure_param, Result};
use crate::ops;
use crate::styles::{MixSelector, StyleCode};

/// `mean softplus(-real) + mean softplus(fake) + r1_term`.
pub fn adv_loss_d(logits_real: &Tensor, logits_fake: &Tensor, r1_term: f64) -> Result<Tensor> {
    let real = ops::softplus(&logits_real.neg()?)?.mean_all()?;
    let fake = ops::softplus(logits_fake)?.mean_all()?;
    Ok(((real + fake)? + r1_term)?)
}

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn adv_loss_g(logits_fake: &Tensor) -> Result<Tensor> {
    Ok(ops::softplus(&logits_fake.neg()?)?.mean_all()?)
}

/// Per-sample `1 - cos(a, b)` for `(b, d)` embeddings with `1e-8` in the denominator.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    let cos = (dot / ((na * nb)? + 1e-8)?)?;
    Ok(cos.neg()?.affine(1.0, 1.0)?)
}

/// Batch mean of `1 - cos(R(I_out), R(I_exe))`.
pub fn identity_loss(i_out: &Tensor, i_exe: &Tensor, net: &IdentityNet) -> Result<Tensor> {
    let a = net.embed(i_out)?;
    let b = net.embed(&i_exe.detach())?;
    Ok(cosine_distance(&a, &b)?.mean_all()?)
}

/// Perceptual distance summed over samples whose exemplar is their ground
/// truth, divided by the batch size. Exactly zero, with no graph, when no
/// sample qualifies.
pub fn lpips_loss(i_out_gated: &Tensor, i_gt: &Tensor, net: &PerceptualNet, same_flags: &[bool]) -> Result<Tensor> {
    let b = i_out_gated.dims()[0];
    ensure_param!(same_flags.len() == b, "{} flags for a batch of {b}", same_flags.len());
    let idx: Vec<u32> = (0..b as u32).filter(|&i| same_flags[i as usize]).collect();
    if idx.is_empty() {
        return Ok(Tensor::zeros((), i_out_gated.dtype(), &Device::Cpu)?);
    }
    let (a, g) = if idx.len() == b {
        (i_out_gated.clone(), i_gt.detach())
    } else {
        let ids = Tensor::from_vec(idx.clone(), idx.len(), &Device::Cpu)?;
        (i_out_gated.index_select(&ids, 0)?, i_gt.detach().index_select(&ids, 0)?)
    };
    Ok((net.distance(&a, &g)?.sum_all()? / b as f64)?)
}

/// `(1/|φ|₀) Σ_i φ_i ||w̄_i - ŵ_i||₂`, averaged over the batch.
pub fn attribute_loss_codes(w_bar: &StyleCode, w_hat: &StyleCode, phi: &MixSelector) -> Result<Tensor> {
    ensure_param!(phi.count_ones() > 0, "attribute loss needs at least one selected layer");
    ensure_param!(
        w_bar.num_layers() == phi.len() && w_hat.num_layers() == phi.len(),
        "selector has {} layers, codes have {} and {}",
        phi.len(),
        w_bar.num_layers(),
        w_hat.num_layers()
    );
    let dtype = w_bar.tensor().dtype();
    let sel: Vec<f64> = phi.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let sel = Tensor::from_vec(sel, (1, phi.len()), &Device::Cpu)?.to_dtype(dtype)?;
    let diff = (w_bar.tensor() - w_hat.tensor().detach())?;
    // The tiny offset keeps the square root differentiable at zero distance.
    let dist = (diff.sqr()?.sum(2)? + 1e-16)?.sqrt()?; // (b, L)
    let per_sample = (dist.broadcast_mul(&sel)?.sum(1)? / phi.count_ones() as f64)?;
    Ok(per_sample.mean_all()?)
}

/// Attribute loss of an (already gated) output image against the mixed code.
pub fn attribute_loss(
    i_out_gated: &Tensor,
    w_hat: &StyleCode,
    phi: &MixSelector,
    encoder: &StyleEncoder,
) -> Result<Tensor> {
    ensure_param!(phi.count_ones() > 0, "attribute loss needs at least one selected layer");
    let w_bar = encoder.encode_style(i_out_gated)?;
    attribute_loss_codes(&w_bar, w_hat, phi)
}

/// Generator-side loss terms, each a scalar tensor.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub adv: Tensor,
    pub id: Tensor,
    pub lpips: Tensor,
    pub attr: Tensor,
}

/// `L_adv + λ_id L_id + λ_lpips L_lpips + λ_attr L_attr`.
pub fn total_objective(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    let mut total = parts.adv.clone();
    for (t, lambda) in [(&parts.id, w.lambda_id), (&parts.lpips, w.lambda_lpips), (&parts.attr, w.lambda_attr)] {
        if lambda != 0.0 {
            total = (total + (t * lambda)?)?;
        }
    }
    Ok(total)
}
