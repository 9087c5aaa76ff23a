//! Spatial variant gradient layer.
//!
//! The gate is an identity map in the forward pass. In the backward pass the
//! incoming gradient is multiplied pointwise by a spatial weight mask, which
//! is broadcast over channels. The mask is a constant: no gradient flows to it.
//!
//! This lets a loss computed in an embedding space (perceptual features, style
//! codes) be shaped spatially without changing its value.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, Var};

use crate::error::{ensure_param, Error, Result};
use crate::masks::WeightMask;
use crate::ops;

struct GateOp {
    weight: Tensor,
}

fn copy_strided<T: Copy>(data: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(data[start..end].to_vec()),
        None => candle_core::bail!("spatial gradient gate expects a contiguous input"),
    }
}

impl CustomOp1 for GateOp {
    fn name(&self) -> &'static str {
        "spatial-gradient-gate"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(copy_strided(v, layout)?),
            CpuStorage::F64(v) => CpuStorage::F64(copy_strided(v, layout)?),
            CpuStorage::BF16(v) => CpuStorage::BF16(copy_strided(v, layout)?),
            CpuStorage::F16(v) => CpuStorage::F16(copy_strided(v, layout)?),
            _ => candle_core::bail!("spatial gradient gate expects a floating point tensor"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let w = self.weight.to_dtype(grad_res.dtype())?;
        Ok(Some(grad_res.broadcast_mul(&w)?))
    }
}

/// Parameter-free gate holding the weight mask for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct SpatialGradientGate {
    weight: Tensor,
}

impl SpatialGradientGate {
    /// `weight` is `(b, 1, h, w)` or `(1, 1, h, w)`; it is detached on construction.
    pub fn new(weight: &Tensor) -> Result<Self> {
        let dims = weight.dims();
        ensure_param!(dims.len() == 4 && dims[1] == 1, "gate weight must be (b, 1, h, w), got {dims:?}");
        Ok(Self { weight: weight.detach() })
    }

    pub fn from_mask(mask: &WeightMask, dtype: DType) -> Result<Self> {
        Self::new(&mask.to_tensor(dtype, &candle_core::Device::Cpu)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (xd, wd) = (x.dims(), self.weight.dims());
        ensure_param!(xd.len() == 4, "gate input must be (b, c, h, w), got {xd:?}");
        ensure_param!(
            xd[2] == wd[2] && xd[3] == wd[3] && (wd[0] == 1 || wd[0] == xd[0]),
            "gate weight {wd:?} does not match input {xd:?}"
        );
        Ok(x.contiguous()?.apply_op1(GateOp { weight: self.weight.clone() })?)
    }
}

/// Identity forward; backward multiplies the gradient by `weight`.
pub fn svgl_apply(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    SpatialGradientGate::new(weight)?.apply(x)
}

/// Comparison of reverse-mode and finite-difference gradients through a gate.
#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Reverse-mode gradient of `loss(gate(x))`.
    pub reverse: Vec<f64>,
    /// `weight ⊙ ∇loss(x)` from central differences.
    pub expected: Vec<f64>,
    pub max_abs_error: f64,
    /// Max absolute error normalised by the largest expected magnitude.
    pub max_rel_error: f64,
}

/// Central finite differences of a scalar loss with respect to every element of `x`.
pub fn finite_difference_gradient<F>(loss_fn: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    ensure_param!(eps > 0.0, "finite-difference step must be positive");
    let base = ops::to_vec_f64(x)?;
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(v, x.shape(), x.device())?.to_dtype(x.dtype())?;
        let l = ops::scalar_f64(&loss_fn(&t)?)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite ({l})")));
        }
        Ok(l)
    };
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Checks that the gradient of `loss_fn(gate(x))` equals `weight ⊙` the
/// finite-difference gradient of `loss_fn` at `x`.
pub fn gradient_check<F>(gate: &SpatialGradientGate, loss_fn: F, x: &Tensor, eps: f64) -> Result<GradientReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_tensor(x)?;
    let loss = loss_fn(&gate.apply(var.as_tensor())?)?;
    let value = ops::scalar_f64(&loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({value})")));
    }
    let grads = loss.backward()?;
    let reverse = match grads.get(var.as_tensor()) {
        Some(g) => ops::to_vec_f64(g)?,
        None => vec![0.0; x.elem_count()],
    };
    let fd = finite_difference_gradient(&loss_fn, x, eps)?;
    let weight = ops::to_vec_f64(&gate.weight.broadcast_as(x.shape())?)?;
    let expected: Vec<f64> = fd.iter().zip(&weight).map(|(g, w)| g * w).collect();
    let max_abs_error = reverse.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = expected.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    Ok(GradientReport { reverse, expected, max_abs_error, max_rel_error: max_abs_error / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn sum_sq(t: &Tensor) -> Result<Tensor> {
        Ok(t.sqr()?.sum_all()?)
    }

    fn gated_grad(x: &Tensor, weight: &Tensor, loss: impl Fn(&Tensor) -> Result<Tensor>) -> Vec<f64> {
        let var = Var::from_tensor(x).unwrap();
        let out = svgl_apply(var.as_tensor(), weight).unwrap();
        let g = loss(&out).unwrap().backward().unwrap();
        ops::to_vec_f64(g.get(var.as_tensor()).unwrap()).unwrap()
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, (2, 3, 5, 4), -3.0, 3.0);
        let w = random(&mut rng, (2, 1, 5, 4), 0.0, 1.0);
        let y = svgl_apply(&x, &w).unwrap();
        let (a, b) = (ops::to_vec_f64(&x).unwrap(), ops::to_vec_f64(&y).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        // Strided (transposed) input.
        let xt = x.transpose(2, 3).unwrap();
        let wt = w.transpose(2, 3).unwrap().contiguous().unwrap();
        let yt = svgl_apply(&xt, &wt).unwrap();
        assert_eq!(ops::to_vec_f64(&yt).unwrap(), ops::to_vec_f64(&xt.contiguous().unwrap()).unwrap());
    }

    #[test]
    fn unit_and_zero_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, (1, 3, 3, 3), -1.0, 1.0);
        let ones = Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let g = gated_grad(&x, &ones, sum_sq);
        let xv = ops::to_vec_f64(&x).unwrap();
        assert!(g.iter().zip(&xv).all(|(g, x)| *g == 2.0 * x));
        let zeros = ones.zeros_like().unwrap();
        assert!(gated_grad(&x, &zeros, sum_sq).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_gradient_is_masked_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, (1, 3, 3, 3), -1.0, 1.0);
        let w = random(&mut rng, (1, 1, 3, 3), 0.0, 1.0);
        let g = gated_grad(&x, &w, sum_sq);
        let (xv, wv) = (ops::to_vec_f64(&x).unwrap(), ops::to_vec_f64(&w).unwrap());
        for c in 0..3 {
            for p in 0..9 {
                let i = c * 9 + p;
                assert!((g[i] - 2.0 * xv[i] * wv[p]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gates_compose_multiplicatively() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, (1, 2, 4, 4), -1.0, 1.0);
        let w1 = random(&mut rng, (1, 1, 4, 4), 0.0, 1.0);
        let w2 = random(&mut rng, (1, 1, 4, 4), 0.0, 1.0);
        let var = Var::from_tensor(&x).unwrap();
        let y = svgl_apply(&svgl_apply(var.as_tensor(), &w1).unwrap(), &w2).unwrap();
        let g = ops::to_vec_f64(y.sqr().unwrap().sum_all().unwrap().backward().unwrap().get(var.as_tensor()).unwrap())
            .unwrap();
        let (xv, a, b) = (ops::to_vec_f64(&x).unwrap(), ops::to_vec_f64(&w1).unwrap(), ops::to_vec_f64(&w2).unwrap());
        for i in 0..32 {
            let p = i % 16;
            assert!((g[i] - 2.0 * xv[i] * a[p] * b[p]).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::zeros((1, 1, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(svgl_apply(&x, &w), Err(Error::Param(_))));
        let w = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(svgl_apply(&x, &w).is_err());
    }

    #[test]
    fn gradient_check_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, (1, 3, 4, 4), -1.0, 1.0);
        let gate = SpatialGradientGate::new(&random(&mut rng, (1, 1, 4, 4), 0.0, 1.0)).unwrap();
        let report = gradient_check(&gate, sum_sq, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn unit_gate_report_agrees_with_ungated_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, (1, 2, 3, 3), -1.0, 1.0);
        let loss = |t: &Tensor| -> Result<Tensor> { Ok(t.sqr()?.sqr()?.sum_all()?) };
        let gate = SpatialGradientGate::new(&Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let report = gradient_check(&gate, loss, &x, 1e-5).unwrap();
        let ungated = finite_difference_gradient(loss, &x, 1e-5).unwrap();
        assert_eq!(report.expected, ungated);
    }

    #[test]
    fn non_finite_loss_is_a_diagnostic_error() {
        let x = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let gate = SpatialGradientGate::new(&Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let loss = |t: &Tensor| -> Result<Tensor> { Ok((t.sum_all()? / 0.0)?) };
        assert!(matches!(gradient_check(&gate, loss, &x, 1e-4), Err(Error::Numeric(_))));
    }
}
