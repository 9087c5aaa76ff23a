//! Image datasets: procedurally drawn toy faces with identity labels, and
//! directories of photographs.
//!
//! Images are stored CHW in `[-1, 1]`.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_param, Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    resolution: usize,
    images: Vec<Vec<f32>>,
    identities: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(resolution: usize, images: Vec<Vec<f32>>, identities: Option<Vec<usize>>) -> Result<Self> {
        let n = 3 * resolution * resolution;
        ensure_param!(images.iter().all(|im| im.len() == n), "every image must hold {n} values");
        if let Some(ids) = &identities {
            ensure_param!(ids.len() == images.len(), "identity labels do not match image count");
        }
        Ok(Self { resolution, images, identities })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn identities(&self) -> Option<&[usize]> {
        self.identities.as_deref()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.as_ref().map_or(0, |ids| ids.iter().max().map_or(0, |m| m + 1))
    }

    /// `(b, 3, R, R)` tensor of the given images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let r = self.resolution;
        let mut v = Vec::with_capacity(indices.len() * 3 * r * r);
        for &i in indices {
            ensure_param!(i < self.images.len(), "image index {i} out of range");
            v.extend_from_slice(&self.images[i]);
        }
        Ok(Tensor::from_vec(v, (indices.len(), 3, r, r), &Device::Cpu)?)
    }

    /// Images `start..start + count` of the procedural toy-face distribution.
    /// Image `i` shows identity `i mod identities`.
    pub fn synthetic(resolution: usize, start: usize, count: usize, identities: usize, seed: u64) -> Result<Self> {
        ensure_param!(identities > 0, "need at least one identity");
        let ids: Vec<usize> = (start..start + count).map(|i| i % identities).collect();
        let images = (start..start + count)
            .zip(&ids)
            .map(|(i, &id)| {
                let face = FaceIdentity::sample(&mut stream_rng(seed, 1, id as u64));
                let pose = FacePose::sample(&mut stream_rng(seed, 2, i as u64));
                render_face(&face, &pose, resolution)
            })
            .collect();
        Self::new(resolution, images, Some(ids))
    }

    /// Every decodable image under `dir` (sorted by path), center-cropped and resized.
    pub fn load_dir(dir: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Param(format!("no png or jpeg images in {}", dir.as_ref().display())));
        }
        let images = paths
            .iter()
            .map(|p| Ok(image_to_chw(&prepare(&image::open(p)?, resolution))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(resolution, images, None)
    }
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Center crop to a square and resize to `resolution`.
pub fn prepare(img: &DynamicImage, resolution: usize) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let crop = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == resolution {
        crop
    } else {
        image::imageops::resize(&crop, resolution as u32, resolution as u32, FilterType::Triangle)
    }
}

pub fn image_to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Quantises `[-1, 1]` values to 8 bits, clamping out-of-range values.
pub fn chw_to_image(chw: &[f32], resolution: usize) -> Result<RgbImage> {
    let n = resolution * resolution;
    ensure_param!(chw.len() == 3 * n, "expected {} values, got {}", 3 * n, chw.len());
    let mut img = RgbImage::new(resolution as u32, resolution as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = chw[c * n + y as usize * resolution + x as usize];
            p[c] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
    }
    Ok(img)
}

/// Rounds every value to the nearest 8-bit level so that PNG encoding is lossless.
pub fn quantize(chw: &[f32]) -> Vec<f32> {
    chw.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() / 127.5 - 1.0).collect()
}

pub fn encode_png(chw: &[f32], resolution: usize) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    chw_to_image(chw, resolution)?.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes an image file and returns `(side, chw)`; the image must be square.
pub fn decode_image(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    ensure_param!(img.width() == img.height(), "image must be square, got {}x{}", img.width(), img.height());
    Ok((img.width() as usize, image_to_chw(&img)))
}

/// Decodes an image and resizes it to `resolution` after a center crop.
pub fn decode_image_resized(bytes: &[u8], resolution: usize) -> Result<Vec<f32>> {
    Ok(image_to_chw(&prepare(&image::load_from_memory(bytes)?, resolution)))
}

/// Per-epoch shuffled visiting order.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpochSampler {
    pub len: usize,
    pub order: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self { len, order: Vec::new(), pos: 0, epoch: 0 }
    }

    pub fn next_index<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug)]
struct FaceIdentity {
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    face_w: f64,
    face_h: f64,
    eye_gap: f64,
    eye_size: f64,
    eye_y: f64,
    brow_tilt: f64,
    nose_len: f64,
    mouth_w: f64,
    hairline: f64,
    hair_len: f64,
    glasses: bool,
}

impl FaceIdentity {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tone = rng.random_range(0.25..0.95);
        let skin = [tone, tone * rng.random_range(0.72..0.85), tone * rng.random_range(0.55..0.72)];
        let hair_palette = [
            [0.1, 0.07, 0.05],
            [0.35, 0.2, 0.1],
            [0.75, 0.6, 0.3],
            [0.55, 0.15, 0.05],
            [0.6, 0.6, 0.6],
            [0.05, 0.05, 0.08],
        ];
        let eye_palette = [[0.25, 0.15, 0.05], [0.2, 0.4, 0.7], [0.25, 0.5, 0.3], [0.1, 0.08, 0.05]];
        let lip_red = rng.random_range(0.55..0.85);
        Self {
            skin,
            hair: hair_palette[rng.random_range(0..hair_palette.len())],
            iris: eye_palette[rng.random_range(0..eye_palette.len())],
            lips: [lip_red, lip_red * 0.35, lip_red * 0.35],
            face_w: rng.random_range(0.48..0.62),
            face_h: rng.random_range(0.62..0.76),
            eye_gap: rng.random_range(0.17..0.26),
            eye_size: rng.random_range(0.06..0.09),
            eye_y: rng.random_range(-0.16..-0.04),
            brow_tilt: rng.random_range(-0.3..0.3),
            nose_len: rng.random_range(0.1..0.2),
            mouth_w: rng.random_range(0.14..0.24),
            hairline: rng.random_range(-0.5..-0.3),
            hair_len: rng.random_range(-0.1..0.7),
            glasses: rng.random_bool(0.3),
        }
    }
}

#[derive(Clone, Debug)]
struct FacePose {
    dx: f64,
    dy: f64,
    scale: f64,
    tilt: f64,
    light: f64,
    smile: f64,
    open: f64,
    background: [f64; 3],
}

impl FacePose {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dx: rng.random_range(-0.05..0.05),
            dy: rng.random_range(-0.05..0.05),
            scale: rng.random_range(0.93..1.07),
            tilt: rng.random_range(-0.14..0.14),
            light: rng.random_range(-0.25..0.25),
            smile: rng.random_range(-0.3..1.0),
            open: rng.random_range(0.0..1.0),
            background: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        }
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Colour of the face at canonical coordinates (`x`, `y` in `[-1, 1]`, `y` down).
fn face_color(f: &FaceIdentity, p: &FacePose, x: f64, y: f64) -> [f64; 3] {
    let mut color = shade(p.background, 0.85 + 0.15 * (1.0 - y) / 2.0);
    let (fw, fh) = (f.face_w, f.face_h);
    // Hair behind the head.
    if ellipse(x, y, 0.0, -0.08, fw * 1.18, fh * 1.12)
        || (f.hair_len > 0.0 && x.abs() < fw * 1.15 && y > 0.0 && y < f.hair_len)
    {
        color = shade(f.hair, 0.8);
    }
    // Neck.
    if x.abs() < fw * 0.42 && y > fh * 0.6 {
        color = shade(f.skin, 0.8);
    }
    if ellipse(x, y, 0.0, 0.0, fw, fh) {
        color = shade(f.skin, 1.0 - 0.25 * (x / fw).powi(2));
        // Hair on the forehead above a curved hairline.
        if y < f.hairline + 0.12 * (x / fw).powi(2) {
            color = f.hair;
        }
        for side in [-1.0, 1.0] {
            let ex = side * f.eye_gap;
            // Brows.
            let by = f.eye_y - f.eye_size * 1.9 + side * f.brow_tilt * (x - ex) * 0.4;
            if (x - ex).abs() < f.eye_size * 1.6 && (y - by).abs() < 0.018 {
                color = shade(f.hair, 0.7);
            }
            if ellipse(x, y, ex, f.eye_y, f.eye_size * 1.5, f.eye_size) {
                color = [0.95, 0.95, 0.95];
                if ellipse(x, y, ex, f.eye_y, f.eye_size * 0.75, f.eye_size * 0.75) {
                    color = f.iris;
                }
                if ellipse(x, y, ex, f.eye_y, f.eye_size * 0.3, f.eye_size * 0.3) {
                    color = [0.02, 0.02, 0.02];
                }
            }
            if f.glasses {
                let r = ((x - ex).powi(2) + (y - f.eye_y).powi(2)).sqrt();
                let ring = f.eye_size * 2.1;
                if (r - ring).abs() < 0.016 || (x.abs() < f.eye_gap - ring && (y - f.eye_y).abs() < 0.012) {
                    color = [0.08, 0.08, 0.1];
                }
            }
        }
        // Nose.
        let ny = f.eye_y + 0.06;
        if y > ny && y < ny + f.nose_len && (x + 0.01).abs() < 0.02 + 0.05 * (y - ny) / f.nose_len {
            color = shade(f.skin, 0.82);
        }
        // Mouth: a smile-curved band whose thickness grows with openness.
        let my = ny + f.nose_len + 0.1;
        let u = x / f.mouth_w;
        if u.abs() < 1.0 {
            let centre = my - p.smile * 0.05 * (1.0 - u * u);
            let half = 0.015 + 0.035 * p.open * (1.0 - u * u);
            if (y - centre).abs() < half {
                color = if p.open > 0.4 && (y - centre).abs() < half * 0.5 { [0.25, 0.05, 0.05] } else { f.lips };
            }
        }
    }
    color
}

fn render_face(f: &FaceIdentity, p: &FacePose, resolution: usize) -> Vec<f32> {
    let n = resolution * resolution;
    let mut out = vec![0f32; 3 * n];
    let (sin, cos) = p.tilt.sin_cos();
    let ss = 2;
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = ((px * ss + sx) as f64 + 0.5) / (resolution * ss) as f64 * 2.0 - 1.0;
                    let v = ((py * ss + sy) as f64 + 0.5) / (resolution * ss) as f64 * 2.0 - 1.0;
                    let (u, v) = ((u - p.dx) / p.scale, (v - p.dy) / p.scale);
                    let (x, y) = (cos * u + sin * v, -sin * u + cos * v);
                    let c = face_color(f, p, x, y);
                    let light = 1.0 + p.light * x * 0.5;
                    for k in 0..3 {
                        acc[k] += (c[k] * light).clamp(0.0, 1.0);
                    }
                }
            }
            for k in 0..3 {
                out[k * n + py * resolution + px] = (acc[k] / (ss * ss) as f64 * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_faces_are_deterministic_and_in_range() {
        let a = Dataset::synthetic(32, 0, 6, 3, 1).unwrap();
        let b = Dataset::synthetic(32, 0, 6, 3, 1).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.identities().unwrap(), &[0, 1, 2, 0, 1, 2]);
        for i in 0..6 {
            assert_eq!(a.image(i), b.image(i));
            assert!(a.image(i).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_ne!(a.image(0), a.image(3));
        let tail = Dataset::synthetic(32, 4, 2, 3, 1).unwrap();
        assert_eq!(tail.image(0), a.image(4));
        assert_eq!(a.batch(&[1, 2]).unwrap().dims(), &[2, 3, 32, 32]);
    }

    #[test]
    fn same_identity_is_closer_than_other_identities_on_average() {
        let d = Dataset::synthetic(32, 0, 40, 4, 3).unwrap();
        let dist = |i: usize, j: usize| -> f64 {
            d.image(i).iter().zip(d.image(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
        };
        let (mut same, mut other, mut ns, mut no) = (0.0, 0.0, 0, 0);
        for i in 0..40 {
            for j in i + 1..40 {
                if i % 4 == j % 4 {
                    same += dist(i, j);
                    ns += 1;
                } else {
                    other += dist(i, j);
                    no += 1;
                }
            }
        }
        assert!(same / (ns as f64) < other / (no as f64));
    }

    #[test]
    fn png_round_trip_after_quantisation() {
        let d = Dataset::synthetic(16, 0, 1, 1, 0).unwrap();
        let q = quantize(d.image(0));
        let (side, back) = decode_image(&encode_png(&q, 16).unwrap()).unwrap();
        assert_eq!(side, 16);
        assert_eq!(back, q);
    }

    #[test]
    fn directory_loader_crops_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(40, 20, |x, _| image::Rgb([if !(10..30).contains(&x) { 0 } else { 255 }, 0, 0]));
        img.save(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let d = Dataset::load_dir(dir.path(), 8).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.image(0)[..64].iter().all(|v| *v == 1.0));
        assert!(Dataset::load_dir(tempfile::tempdir().unwrap().path(), 8).is_err());
    }

    #[test]
    fn sampler_visits_each_index_once_per_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = EpochSampler::new(5);
        let mut first: Vec<usize> = (0..5).map(|_| s.next_index(&mut rng)).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.epoch, 1);
        s.next_index(&mut rng);
        assert_eq!(s.epoch, 2);
    }
}
