//! Hole masks and the spatial weight masks derived from them.
//!
//! A [`BinaryMask`] marks unknown pixels with 1. The confidence weight mask is
//! a Gaussian-blurred copy of the hole restricted to the hole itself, so it is
//! close to 1 deep inside the hole and falls off toward the boundary. The
//! reverse weight mask is its complement inside the hole.

use std::io::{Read, Write};

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{ensure_param, param_err, Error, Result};

const WEIGHT_MASK_MAGIC: &[u8; 4] = b"WMSK";
const CONTAINER_VERSION: u32 = 1;

/// Hole indicator: 1 = unknown, 0 = known.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure_param!(data.len() == height * width, "mask data has {} values, expected {}", data.len(), height * width);
        ensure_param!(data.iter().all(|&v| v <= 1), "binary mask values must be 0 or 1");
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of pixels that are holes.
    pub fn masked_ratio(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        ensure_param!(
            self.height == other.height && self.width == other.width,
            "mask shapes differ: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, data })
    }

    /// `(1, 1, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let values: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(values, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Reads back a `(1, 1, h, w)` or `(h, w)` tensor, treating values >= 0.5 as holes.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [1, 1, h, w] | [h, w] => (*h, *w),
            _ => return Err(param_err!("cannot read a mask from shape {dims:?}")),
        };
        let data = crate::ops::to_vec_f32(t)?.into_iter().map(|v| (v >= 0.5) as u8).collect();
        Ok(Self { height: h, width: w, data })
    }

    /// Single-channel 8-bit PNG, 255 = unknown.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let pixels: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .ok_or_else(|| Error::Format("mask buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
        Ok(Self { height: h as usize, width: w as usize, data })
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Continuous per-pixel gradient weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl WeightMask {
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure_param!(
            data.len() == height * width,
            "weight mask has {} values, expected {}",
            data.len(),
            height * width
        );
        ensure_param!(data.iter().all(|v| (0.0..=1.0).contains(v)), "weight mask values must lie in [0, 1]");
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_vec(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Binary container: magic `WMSK`, version, height, width (u32 LE), then f32 LE values row-major.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHT_MASK_MAGIC)?;
        for v in [CONTAINER_VERSION, self.height as u32, self.width as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHT_MASK_MAGIC {
            return Err(Error::Format("not a weight mask container".into()));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 3];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        if header[0] != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported weight mask version {}", header[0])));
        }
        let (h, w) = (header[1] as usize, header[2] as usize);
        let mut data = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            input.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word));
        }
        Self::from_vec(h, w, data)
    }
}

/// Free-form brush stroke parameters, in pixels and degrees.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BrushParams {
    pub max_vertex: u32,
    pub max_length: f64,
    pub max_brush_width: f64,
    pub max_angle: f64,
}

impl BrushParams {
    /// Values for 256x256 images.
    pub const REFERENCE: BrushParams =
        BrushParams { max_vertex: 20, max_length: 100.0, max_brush_width: 24.0, max_angle: 360.0 };

    /// Reference parameters with lengths and widths scaled from 256 pixels to `side`.
    pub fn scaled_to(side: usize) -> Self {
        let s = side as f64 / 256.0;
        BrushParams {
            max_length: Self::REFERENCE.max_length * s,
            max_brush_width: Self::REFERENCE.max_brush_width * s,
            ..Self::REFERENCE
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param!(self.max_vertex >= 1, "max_vertex must be positive");
        ensure_param!(self.max_length >= 0.0 && self.max_length.is_finite(), "max_length must be non-negative");
        ensure_param!(
            self.max_brush_width >= 1.0 && self.max_brush_width.is_finite(),
            "max_brush_width must be at least 1 pixel"
        );
        ensure_param!(self.max_angle > 0.0 && self.max_angle <= 360.0, "max_angle must lie in (0, 360]");
        Ok(())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    ensure_param!(h >= 8 && w >= 8, "mask size must be at least 8x8, got {h}x{w}");
    Ok(())
}

/// Sets every pixel whose centre lies within `radius` of the segment `a`-`b`.
fn draw_capsule(mask: &mut BinaryMask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let y0 = (a.0.min(b.0) - radius).floor().max(0.0) as isize;
    let y1 = ((a.0.max(b.0) + radius).ceil() as isize).min(h - 1);
    let x0 = (a.1.min(b.1) - radius).floor().max(0.0) as isize;
    let x1 = ((a.1.max(b.1) + radius).ceil() as isize).min(w - 1);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 - a.0, x as f64 - a.1);
            let t = if len2 > 0.0 { ((py * dy + px * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= r2 {
                mask.data[y as usize * mask.width + x as usize] = 1;
            }
        }
    }
}

/// Random polyline walk rendered with round caps.
pub fn sample_brush_strokes<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, p: &BrushParams) -> Result<BinaryMask> {
    check_size(h, w)?;
    p.validate()?;
    let mut mask = BinaryMask::zeros(h, w);
    let vertices = rng.random_range(1..=p.max_vertex);
    let mut cur = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
    for _ in 0..vertices {
        let angle = rng.random_range(0.0..=p.max_angle).to_radians();
        let length = rng.random_range(0.0..=p.max_length);
        let width = rng.random_range(1.0..=p.max_brush_width);
        let next = (
            (cur.0 + length * angle.sin()).clamp(0.0, (h - 1) as f64),
            (cur.1 + length * angle.cos()).clamp(0.0, (w - 1) as f64),
        );
        draw_capsule(&mut mask, cur, next, width / 2.0);
        cur = next;
    }
    Ok(mask)
}

/// Axis-aligned rectangle in pixel coordinates (inclusive top-left, exclusive extent).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RectangleLayout {
    pub half: Vec<Rect>,
    pub quarter: Vec<Rect>,
}

impl RectangleLayout {
    pub fn render(&self, h: usize, w: usize) -> BinaryMask {
        let mut mask = BinaryMask::zeros(h, w);
        for r in self.half.iter().chain(&self.quarter) {
            for y in r.top..r.top + r.height {
                mask.data[y * w + r.left..y * w + r.left + r.width].fill(1);
            }
        }
        mask
    }
}

fn sample_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, max_h: usize, max_w: usize) -> Rect {
    let height = rng.random_range(1..=max_h.max(1));
    let width = rng.random_range(1..=max_w.max(1));
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    Rect { top, left, height, width }
}

/// Up to five half-size and up to ten quarter-size rectangles.
pub fn sample_rectangle_layout<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Result<RectangleLayout> {
    check_size(h, w)?;
    let n_half = rng.random_range(0..=5usize);
    let n_quarter = rng.random_range(0..=10usize);
    let half = (0..n_half).map(|_| sample_rect(rng, h, w, h / 2, w / 2)).collect();
    let quarter = (0..n_quarter).map(|_| sample_rect(rng, h, w, h / 4, w / 4)).collect();
    Ok(RectangleLayout { half, quarter })
}

pub fn sample_rectangles<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Result<BinaryMask> {
    Ok(sample_rectangle_layout(rng, h, w)?.render(h, w))
}

/// Union of a brush-stroke mask and a rectangle mask, drawn in that order.
pub fn sample_freeform<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, p: &BrushParams) -> Result<BinaryMask> {
    let strokes = sample_brush_strokes(rng, h, w, p)?;
    let rects = sample_rectangles(rng, h, w)?;
    strokes.union(&rects)
}

/// Centered rectangle covering `frac` of each side.
pub fn center_mask(h: usize, w: usize, frac: f64) -> Result<BinaryMask> {
    ensure_param!(frac > 0.0 && frac <= 1.0, "center mask fraction must lie in (0, 1], got {frac}");
    let mh = ((frac * h as f64).round() as usize).clamp(1, h);
    let mw = ((frac * w as f64).round() as usize).clamp(1, w);
    let layout = RectangleLayout {
        half: vec![Rect { top: (h - mh) / 2, left: (w - mw) / 2, height: mh, width: mw }],
        quarter: Vec::new(),
    };
    Ok(layout.render(h, w))
}

/// Blur settings for the confidence mask.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlurParams {
    pub kernel: usize,
    pub sigma: f64,
}

impl BlurParams {
    /// Kernel of roughly side/8 rounded to odd, sigma = kernel/3.
    pub fn for_resolution(side: usize) -> Self {
        let target = side as f64 / 8.0;
        let kernel = (2.0 * ((target - 1.0) / 2.0).round() + 1.0).max(1.0) as usize;
        BlurParams { kernel, sigma: kernel as f64 / 3.0 }
    }
}

/// Index into `[0, n)` with mirror reflection that does not repeat the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn gaussian_kernel_1d(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// `M_w = (G_sigma * M) ⊙ M` with a normalized separable Gaussian and reflect padding.
pub fn confidence_weight(mask: &BinaryMask, kernel: usize, sigma: f64) -> Result<WeightMask> {
    ensure_param!(kernel % 2 == 1, "blur kernel must be odd and positive, got {kernel}");
    ensure_param!(sigma > 0.0 && sigma.is_finite(), "blur sigma must be positive, got {sigma}");
    let (h, w) = (mask.height, mask.width);
    let g = gaussian_kernel_1d(kernel, sigma);
    let r = (kernel / 2) as isize;
    let src: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] =
                g.iter().enumerate().map(|(k, gk)| gk * src[y * w + reflect(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.data[y * w + x] == 0 {
                continue;
            }
            let v: f64 =
                g.iter().enumerate().map(|(k, gk)| gk * rows[reflect(y as isize + k as isize - r, h) * w + x]).sum();
            data[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(WeightMask { height: h, width: w, data })
}

/// `M̄_w = (1 - M_w) ⊙ M`.
pub fn reverse_weight(confidence: &WeightMask, mask: &BinaryMask) -> Result<WeightMask> {
    ensure_param!(
        confidence.height == mask.height && confidence.width == mask.width,
        "weight mask {}x{} does not match binary mask {}x{}",
        confidence.height,
        confidence.width,
        mask.height,
        mask.width
    );
    let data = confidence.data.iter().zip(&mask.data).map(|(&c, &m)| if m == 1 { 1.0 - c } else { 0.0 }).collect();
    Ok(WeightMask { height: mask.height, width: mask.width, data })
}

/// Stacks per-sample masks into a `(b, 1, h, w)` tensor.
pub fn stack_binary(masks: &[BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let parts = masks.iter().map(|m| m.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn stack_weights(masks: &[WeightMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let parts = masks.iter().map(|m| m.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}
