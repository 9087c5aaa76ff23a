//! Tensor primitives shared by the networks.
//!
//! The convolution is a custom op backed by im2col and a blocked GEMM; its
//! backward pass is written out explicitly rather than going through the
//! generic transposed-convolution path, which is an order of magnitude slower
//! on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{ensure_param, Result};

trait Gemm: WithDType + Default + std::ops::AddAssign {
    /// `c = a * b + beta * c`, row-major `c` of shape `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    /// Runs `f` on a reusable per-thread buffer of at least `n` elements.
    /// The contents are unspecified on entry.
    fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;
}

thread_local! {
    static SCRATCH_F32: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
    static SCRATCH_F64: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_buffer<T: Copy + Default, R>(
    key: &'static std::thread::LocalKey<std::cell::RefCell<Vec<T>>>,
    n: usize,
    f: impl FnOnce(&mut [T]) -> R,
) -> R {
    key.with(|cell| match cell.try_borrow_mut() {
        Ok(mut buf) => {
            if buf.len() < n {
                buf.resize(n, T::default());
            }
            f(&mut buf[..n])
        }
        // Re-entrant use falls back to a fresh allocation.
        Err(_) => f(&mut vec![T::default(); n]),
    })
}

impl Gemm for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: strides and extents are derived from the slice shapes by the callers below.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }

    fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
        with_buffer(&SCRATCH_F32, n, f)
    }
}

impl Gemm for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }

    fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
        with_buffer(&SCRATCH_F64, n, f)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Source and destination column ranges of a row shifted by `dx` with zero
/// padding: `dst[lo..hi] = src[lo + dx..hi + dx]`.
fn shifted_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(lo as isize) as usize;
    (lo, hi.min(w))
}

fn im2col<T: Copy + Default>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w, g.k);
    let p = (k / 2) as isize;
    let hw = g.hw();
    for ci in 0..g.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let (lo, hi) = shifted_span(w, dx);
                for y in 0..h {
                    let sy = y + ky as isize - p;
                    let d = &mut dst[y as usize * w..(y as usize + 1) * w];
                    if sy < 0 || sy >= h {
                        d.fill(T::default());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    d[..lo].fill(T::default());
                    d[hi..].fill(T::default());
                    d[lo..hi].copy_from_slice(&src[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                }
            }
        }
    }
}

fn col2im<T: Copy + std::ops::AddAssign>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w, g.k);
    let p = (k / 2) as isize;
    let hw = g.hw();
    for ci in 0..g.c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let (lo, hi) = shifted_span(w, dx);
                for y in 0..h {
                    let sy = y + ky as isize - p;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let dst = &mut plane
                        [sy as usize * w + (lo as isize + dx) as usize..sy as usize * w + (hi as isize + dx) as usize];
                    let s = &src[y as usize * w + lo..y as usize * w + hi];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Gemm>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, ckk, o) = (g.hw(), g.ckk(), g.o);
    let mut out = vec![T::default(); g.b * o * hw];
    let n = if g.k == 1 { 0 } else { ckk * hw };
    T::with_scratch(n, |col| {
        for bi in 0..g.b {
            let xb = &x[bi * g.c * hw..(bi + 1) * g.c * hw];
            let cols: &[T] = if g.k == 1 {
                xb
            } else {
                im2col(xb, g, col);
                col
            };
            T::gemm(
                o,
                ckk,
                hw,
                (wt, ckk as isize, 1),
                (cols, hw as isize, 1),
                T::zero(),
                &mut out[bi * o * hw..(bi + 1) * o * hw],
            );
        }
    });
    out
}

fn conv_backward<T: Gemm>(x: &[T], wt: &[T], grad: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (hw, ckk, o) = (g.hw(), g.ckk(), g.o);
    let mut gx = vec![T::default(); g.b * g.c * hw];
    let mut gw = vec![T::default(); o * ckk];
    let n = if g.k == 1 { 0 } else { ckk * hw };
    T::with_scratch(n, |col| {
        for bi in 0..g.b {
            let gb = &grad[bi * o * hw..(bi + 1) * o * hw];
            let xb = &x[bi * g.c * hw..(bi + 1) * g.c * hw];
            let gxb = &mut gx[bi * g.c * hw..(bi + 1) * g.c * hw];
            if g.k == 1 {
                T::gemm(o, hw, ckk, (gb, hw as isize, 1), (xb, 1, hw as isize), T::one(), &mut gw);
                T::gemm(ckk, o, hw, (wt, 1, ckk as isize), (gb, hw as isize, 1), T::zero(), gxb);
            } else {
                im2col(xb, g, col);
                T::gemm(o, hw, ckk, (gb, hw as isize, 1), (col, 1, hw as isize), T::one(), &mut gw);
                T::gemm(ckk, o, hw, (wt, 1, ckk as isize), (gb, hw as isize, 1), T::zero(), col);
                col2im(col, g, gxb);
            }
        }
    });
    (gx, gw)
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d_same expects contiguous operands"),
    }
}

struct ConvSame;

impl CustomOp2 for ConvSame {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (o, c2, k, _) = l2.shape().dims4()?;
        if c != c2 {
            candle_core::bail!("conv2d_same channel mismatch: input {c}, kernel {c2}");
        }
        let g = ConvGeom { b, c, h, w, o, k };
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(wt)) => {
                CpuStorage::F32(conv_forward(contiguous_slice(x, l1)?, contiguous_slice(wt, l2)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(wt)) => {
                CpuStorage::F64(conv_forward(contiguous_slice(x, l1)?, contiguous_slice(wt, l2)?, &g))
            }
            _ => candle_core::bail!("conv2d_same supports f32/f64 operands of matching dtype"),
        };
        Ok((storage, Shape::from((b, o, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let (o, _, k, _) = wt.dims4()?;
        let g = ConvGeom { b, c, h, w, o, k };
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = conv_backward(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &wt.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    &g,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw) = conv_backward(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &wt.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    &g,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?)
            }
            dt => candle_core::bail!("conv2d_same backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Stride-1 convolution with zero "same" padding. `x` is `(b, c, h, w)`,
/// `kernel` is `(o, c, k, k)` with odd `k`.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, _, kh, kw) = kernel.dims4()?;
    ensure_param!(kh == kw && kh % 2 == 1, "conv kernel must be square and odd, got {kh}x{kw}");
    let (_, c, _, _) = x.dims4()?;
    let (_, kc, _, _) = kernel.dims4()?;
    ensure_param!(c == kc, "conv channel mismatch: input has {c}, kernel expects {kc}");
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(&kernel, ConvSame)?)
}

struct ChannelBias;

fn bias_fwd<T: Copy + std::ops::Add<Output = T>>(x: &[T], bias: &[T], planes: usize, hw: usize) -> Vec<T> {
    let c = bias.len();
    let mut out = Vec::with_capacity(x.len());
    for p in 0..planes {
        let b = bias[p % c];
        out.extend(x[p * hw..(p + 1) * hw].iter().map(|&v| v + b));
    }
    out
}

fn bias_bwd<T: Copy + Default + std::ops::AddAssign>(grad: &[T], c: usize, planes: usize, hw: usize) -> Vec<T> {
    let mut g = vec![T::default(); c];
    for p in 0..planes {
        let mut acc = T::default();
        for &v in &grad[p * hw..(p + 1) * hw] {
            acc += v;
        }
        g[p % c] += acc;
    }
    g
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if l2.shape().elem_count() != c {
            candle_core::bail!("channel bias needs {c} values, got {:?}", l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                CpuStorage::F32(bias_fwd(contiguous_slice(x, l1)?, contiguous_slice(y, l2)?, b * c, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                CpuStorage::F64(bias_fwd(contiguous_slice(x, l1)?, contiguous_slice(y, l2)?, b * c, h * w))
            }
            _ => candle_core::bail!("channel bias expects matching f32/f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let gb = match grad.dtype() {
            DType::F32 => Tensor::from_vec(
                bias_bwd(&grad.flatten_all()?.to_vec1::<f32>()?, c, b * c, h * w),
                bias.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                bias_bwd(&grad.flatten_all()?.to_vec1::<f64>()?, c, b * c, h * w),
                bias.shape(),
                x.device(),
            )?,
            dt => candle_core::bail!("channel bias backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// `x + bias[c]` for `(b, c, h, w)` input and `(c,)` bias.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

struct ChannelScale;

fn scale_fwd<T: Copy + std::ops::Mul<Output = T>>(x: &[T], s: &[T], hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (p, &k) in s.iter().enumerate() {
        out.extend(x[p * hw..(p + 1) * hw].iter().map(|&v| v * k));
    }
    out
}

fn scale_bwd_s<T: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = T>>(
    x: &[T],
    grad: &[T],
    planes: usize,
    hw: usize,
) -> Vec<T> {
    (0..planes)
        .map(|p| {
            let mut acc = T::default();
            for (&a, &g) in x[p * hw..(p + 1) * hw].iter().zip(&grad[p * hw..(p + 1) * hw]) {
                acc += a * g;
            }
            acc
        })
        .collect()
}

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if l2.shape().elem_count() != b * c {
            candle_core::bail!("channel scale needs {} values, got {:?}", b * c, l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                CpuStorage::F32(scale_fwd(contiguous_slice(x, l1)?, contiguous_slice(y, l2)?, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                CpuStorage::F64(scale_fwd(contiguous_slice(x, l1)?, contiguous_slice(y, l2)?, h * w))
            }
            _ => candle_core::bail!("channel scale expects matching f32/f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(&scale.contiguous()?, &ChannelScale)?;
        let gs = match grad.dtype() {
            DType::F32 => Tensor::from_vec(
                scale_bwd_s(&x.flatten_all()?.to_vec1::<f32>()?, &grad.flatten_all()?.to_vec1::<f32>()?, b * c, h * w),
                scale.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                scale_bwd_s(&x.flatten_all()?.to_vec1::<f64>()?, &grad.flatten_all()?.to_vec1::<f64>()?, b * c, h * w),
                scale.shape(),
                x.device(),
            )?,
            dt => candle_core::bail!("channel scale backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gs)))
    }
}

/// `x[b, c] * scale[b, c]` for `(b, c, h, w)` input and `(b, c)` scales.
pub fn scale_channels(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&scale.contiguous()?, ChannelScale)?)
}

pub const LRELU_SLOPE: f64 = 0.2;

/// Elementwise map over a contiguous f32/f64 storage.
fn map_storage(
    s: &CpuStorage,
    l: &Layout,
    f32_fn: impl Fn(f32) -> f32,
    f64_fn: impl Fn(f64) -> f64,
) -> candle_core::Result<CpuStorage> {
    Ok(match s {
        CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, l)?.iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, l)?.iter().map(|&x| f64_fn(x)).collect()),
        _ => candle_core::bail!("expected an f32 or f64 tensor"),
    })
}

struct LRelu;

impl CustomOp1 for LRelu {
    fn name(&self) -> &'static str {
        "lrelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (hi, lo) = (std::f64::consts::SQRT_2, LRELU_SLOPE * std::f64::consts::SQRT_2);
        let out = map_storage(
            s,
            l,
            |x| x * if x > 0.0 { hi as f32 } else { lo as f32 },
            |x| x * if x > 0.0 { hi } else { lo },
        )?;
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &LReluGrad)?))
    }
}

struct LReluGrad;

impl CustomOp2 for LReluGrad {
    fn name(&self) -> &'static str {
        "lrelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (hi, lo) = (std::f64::consts::SQRT_2, LRELU_SLOPE * std::f64::consts::SQRT_2);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * if x > 0.0 { hi as f32 } else { lo as f32 })
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * if x > 0.0 { hi } else { lo })
                    .collect(),
            ),
            _ => candle_core::bail!("lrelu backward expects matching f32/f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Leaky ReLU with slope 0.2 followed by the usual sqrt(2) gain.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LRelu)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

struct Upsample2x;

fn upsample_slice<T: Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w * 4);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..(p * h + y + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(upsample_slice(contiguous_slice(v, l)?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample_slice(contiguous_slice(v, l)?, b * c, h, w)),
            _ => candle_core::bail!("upsample2x expects an f32 or f64 tensor"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad.avg_pool2d(2)? * 4.0)?))
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// 2x2 average pooling.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Batched `(b, n, k) x (k, m)` with a shared right operand, avoiding
/// broadcast-strided matmul operands.
pub fn linear_rows(x: &Tensor, weight_t: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.matmul(&weight_t.contiguous()?)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}
