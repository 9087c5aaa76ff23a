//! FID, unpaired/paired separability scores and the masked-ratio protocol.
//!
//! Features come from a small convolutional pyramid with fixed random weights
//! (seeded, never trained). Its parameter hash goes into every report so that
//! only reports made with the same extractor are compared.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::embeddings::ConvPyramid;
use crate::error::{ensure_param, Error, Result};
use crate::masks::{self, BinaryMask, BrushParams};
use crate::nn::ParamStore;
use crate::ops;
use crate::training::DTYPE;

/// `n × d` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        ensure_param!(n >= 2, "a feature set needs at least two rows, got {n}");
        ensure_param!(d >= 1, "feature dimension must be positive");
        ensure_param!(data.len() == n * d, "expected {} values for {n}x{d}, got {}", n * d, data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature set contains non-finite values".into()));
        }
        Ok(Self { n, d, data })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }
}

/// Frozen random convolutional feature extractor.
#[derive(Debug)]
pub struct FeatureExtractor {
    resolution: usize,
    pyramid: ConvPyramid,
    hash: String,
    dim: usize,
}

impl FeatureExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed_fea7;

    /// Default extractor for square images of side `resolution`: analysis at
    /// `min(resolution, 32)`, 16 channels per level, global average pooling.
    pub fn desk(resolution: usize) -> Result<Self> {
        let analysis = resolution.min(32);
        ensure_param!(analysis.is_power_of_two() && analysis >= 8, "unsupported resolution {resolution}");
        let levels = analysis.trailing_zeros() as usize - 1;
        Self::new(resolution, analysis, &vec![16; levels], Self::DEFAULT_SEED)
    }

    pub fn new(resolution: usize, analysis: usize, channels: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DTYPE, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pyramid = ConvPyramid::new(&mut store, "extractor", resolution, analysis, channels, &mut rng)?;
        let mut h = Sha256::new();
        h.update(format!("extractor:{resolution}:{analysis}:{channels:?}:").as_bytes());
        h.update(store.hash()?.as_bytes());
        let hash = hex::encode(h.finalize());
        Ok(Self { resolution, pyramid, hash, dim: channels.iter().sum() })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(b, dim)` features: spatial means of every pyramid level, concatenated.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.pyramid.features(&images.to_dtype(DTYPE)?)?;
        let pooled = feats.iter().map(|f| Ok(f.mean(3)?.mean(2)?)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

/// Features of `(n, 3, R, R)` images, computed in chunks of 64.
pub fn extract_features(images: &Tensor, extractor: &FeatureExtractor) -> Result<FeatureSet> {
    let n = images.dims4()?.0;
    let mut data = Vec::with_capacity(n * extractor.dim());
    let mut start = 0;
    while start < n {
        let len = (n - start).min(64);
        data.extend(ops::to_vec_f64(&extractor.embed(&images.narrow(0, start, len)?)?)?);
        start += len;
    }
    FeatureSet::new(n, extractor.dim(), data)
}

const FID_EPS: f64 = 1e-6;

fn mean_cov(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows() as f64;
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_EPS;
    }
    (mean, cov)
}

fn symmetric_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -1e-9 * scale) {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalue {v:.3e} (largest magnitude {scale:.3e})"
        )));
    }
    Ok(eig)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    ensure_param!(a.dim() == b.dim(), "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    let (mu_a, cov_a) = mean_cov(&a.matrix());
    let (mu_b, cov_b) = mean_cov(&b.matrix());
    let ea = symmetric_eigenvalues(cov_a.clone(), "covariance")?;
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = symmetric_eigenvalues(&sqrt_a * &cov_b * &sqrt_a, "covariance product")?;
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    let d = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("non-finite FID (mean term {diff}, trace term {tr_sqrt})")));
    }
    Ok(d.max(0.0))
}

/// Soft-margin linear SVM (hinge loss, `C`) solved by dual coordinate
/// descent in a fixed pseudo-random order. Returns `(w, b)`.
pub fn fit_linear_svm(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<(Vec<f64>, f64)> {
    ensure_param!(x.len() == y.len() && !x.is_empty(), "need matching, non-empty samples and labels");
    let d = x[0].len();
    // The bias is learned as the weight of a constant feature.
    let q: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0; x.len()];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5000 {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let s: f64 = x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let g = y[i] * s - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                for (wk, xk) in w.iter_mut().zip(&x[i]) {
                    *wk += step * xk;
                }
                b += step;
            }
        }
        if pg_max - pg_min < 1e-6 {
            break;
        }
    }
    Ok((w, b))
}

/// `(U-IDS, P-IDS)`: misclassification rate of a linear SVM separating real
/// from fake features, and the fraction of pairs whose fake scores as more
/// real than its paired real. Ties count one half.
pub fn ids_scores(real: &FeatureSet, fake: &FeatureSet) -> Result<(f64, f64)> {
    ensure_param!(real.rows() == fake.rows(), "IDS needs equal counts, got {} and {}", real.rows(), fake.rows());
    ensure_param!(real.dim() == fake.dim(), "feature dimensions differ");
    let (n, d) = (real.rows(), real.dim());
    // Standardise with pooled statistics; constant columns carry no information.
    let mut cols = Vec::new();
    for k in 0..d {
        let vals = (0..n).flat_map(|i| [real.row(i)[k], fake.row(i)[k]]);
        let mean = vals.clone().sum::<f64>() / (2 * n) as f64;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (2 * n) as f64;
        if var > 1e-24 {
            cols.push((k, mean, var.sqrt()));
        }
    }
    if cols.is_empty() {
        return Err(Error::Numeric("degenerate features: every dimension is constant".into()));
    }
    let project = |r: &[f64]| -> Vec<f64> { cols.iter().map(|&(k, m, s)| (r[k] - m) / s).collect() };
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(2 * n);
    for i in 0..n {
        x.push(project(real.row(i)));
        y.push(1.0);
    }
    for i in 0..n {
        x.push(project(fake.row(i)));
        y.push(-1.0);
    }
    let (w, b) = fit_linear_svm(&x, &y, 1.0)?;
    let score = |r: &[f64]| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
    let scores: Vec<f64> = x.iter().map(|r| score(r)).collect();
    let half = |cond_lt: bool, tie: bool| {
        if tie {
            0.5
        } else if cond_lt {
            1.0
        } else {
            0.0
        }
    };
    let u = scores.iter().zip(&y).map(|(s, l)| half(s * l < 0.0, *s == 0.0)).sum::<f64>() / (2 * n) as f64;
    let p = (0..n).map(|i| half(scores[n + i] > scores[i], scores[n + i] == scores[i])).sum::<f64>() / n as f64;
    Ok((u, p))
}

/// A masked-ratio bin `[lo, hi)` or the fixed center rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskBin {
    Ratio { lo: f64, hi: f64 },
    Center,
}

/// Side fraction of the center rectangle (a quarter of the area).
pub const CENTER_FRACTION: f64 = 0.5;

impl MaskBin {
    pub fn contains(&self, ratio: f64) -> bool {
        match *self {
            MaskBin::Ratio { lo, hi } => ratio >= lo && ratio < hi,
            MaskBin::Center => true,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MaskBin::Ratio { lo, hi } => format!("{lo:.2}-{hi:.2}"),
            MaskBin::Center => "center".into(),
        }
    }

    /// Draws a mask for this bin: free-form masks, grown by extra strokes
    /// while below the range and redrawn when they overshoot.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, side: usize, brush: &BrushParams) -> Result<BinaryMask> {
        let (lo, hi) = match *self {
            MaskBin::Center => return masks::center_mask(side, side, CENTER_FRACTION),
            MaskBin::Ratio { lo, hi } => (lo, hi),
        };
        for _ in 0..1000 {
            let mut m = masks::sample_freeform(rng, side, side, brush)?;
            while m.masked_ratio() < lo {
                m = m.union(&masks::sample_brush_strokes(rng, side, side, brush)?)?;
            }
            if self.contains(m.masked_ratio()) {
                return Ok(m);
            }
        }
        Err(Error::Param(format!("could not draw a mask with ratio in [{lo}, {hi})")))
    }
}

/// Ten-percent bins from 10% to 70% and the center mask.
pub fn default_bins() -> Vec<MaskBin> {
    let mut bins: Vec<MaskBin> =
        (1..7).map(|k| MaskBin::Ratio { lo: k as f64 / 10.0, hi: (k + 1) as f64 / 10.0 }).collect();
    bins.push(MaskBin::Center);
    bins
}

/// Anything that can fill holes. `image` is the full ground-truth image;
/// implementations may only use its pixels outside `mask` (1 = hole).
pub trait Inpainter {
    fn inpaint(&self, image: &Tensor, mask: &Tensor, exemplar: &Tensor, seed: u64) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinReport {
    pub bin: MaskBin,
    pub count: usize,
    pub mean_ratio: f64,
    pub fid: f64,
    pub u_ids: f64,
    pub p_ids: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub extractor_hash: String,
    pub samples_per_bin: usize,
    pub seed: u64,
    pub bins: Vec<BinReport>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub brush: BrushParams,
}

impl EvalOptions {
    pub fn for_resolution(side: usize) -> Self {
        Self { batch_size: 16, seed: 1, brush: BrushParams::scaled_to(side) }
    }
}

/// Runs the binned protocol on the first `n_samples` images of `data`.
/// Exemplars are the images of the same batch in reverse order.
pub fn evaluate(
    inpainter: &dyn Inpainter,
    data: &Dataset,
    extractor: &FeatureExtractor,
    bins: &[MaskBin],
    n_samples: usize,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    ensure_param!(n_samples >= 2, "need at least two samples per bin, got {n_samples}");
    ensure_param!(data.len() >= n_samples, "dataset has {} images, {n_samples} requested", data.len());
    ensure_param!(opts.batch_size >= 1, "batch size must be positive");
    ensure_param!(!bins.is_empty(), "no mask bins given");
    let side = data.resolution();
    ensure_param!(
        side == extractor.resolution(),
        "extractor expects {}x{} images",
        extractor.resolution(),
        extractor.resolution()
    );
    let indices: Vec<usize> = (0..n_samples).collect();
    let reals = data.batch(&indices)?;
    let real_feats = extract_features(&reals, extractor)?;
    let mut reports = Vec::with_capacity(bins.len());
    for (bi, bin) in bins.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(bi as u64 + 1);
        let mut outputs = Vec::new();
        let mut ratio_sum = 0.0;
        for (ci, chunk) in indices.chunks(opts.batch_size).enumerate() {
            let masks: Vec<BinaryMask> =
                chunk.iter().map(|_| bin.sample(&mut rng, side, &opts.brush)).collect::<Result<_>>()?;
            ratio_sum += masks.iter().map(|m| m.masked_ratio()).sum::<f64>();
            let mask = masks::stack_binary(&masks, DTYPE, &Device::Cpu)?;
            let rev: Vec<usize> = chunk.iter().rev().copied().collect();
            let gt = data.batch(chunk)?;
            let exe = data.batch(&rev)?;
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((bi * 100_000 + ci) as u64);
            let out = inpainter.inpaint(&gt, &mask, &exe, seed)?;
            ensure_param!(out.dims() == gt.dims(), "inpainter returned {:?} for {:?}", out.dims(), gt.dims());
            outputs.push(out.to_dtype(DTYPE)?);
        }
        let fake = extract_features(&Tensor::cat(&outputs, 0)?, extractor)?;
        let fid_v = fid(&real_feats, &fake)?;
        let (u, p) = ids_scores(&real_feats, &fake)?;
        reports.push(BinReport {
            bin: *bin,
            count: n_samples,
            mean_ratio: ratio_sum / n_samples as f64,
            fid: fid_v,
            u_ids: u,
            p_ids: p,
        });
    }
    Ok(EvalReport {
        extractor_hash: extractor.hash().to_string(),
        samples_per_bin: n_samples,
        seed: opts.seed,
        bins: reports,
    })
}

impl EvalReport {
    pub fn bin(&self, bin: &MaskBin) -> Option<&BinReport> {
        self.bins.iter().find(|b| b.bin == *bin)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "extractor_hash = {}", self.extractor_hash);
        let _ = writeln!(s, "samples_per_bin = {}", self.samples_per_bin);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "bin\tlo\thi\tcount\tmean_ratio\tfid\tu_ids\tp_ids");
        for b in &self.bins {
            let (kind, lo, hi) = match b.bin {
                MaskBin::Ratio { lo, hi } => ("ratio", lo.to_string(), hi.to_string()),
                MaskBin::Center => ("center", "-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{kind}\t{lo}\t{hi}\t{}\t{:?}\t{:?}\t{:?}\t{:?}",
                b.count, b.mean_ratio, b.fid, b.u_ids, b.p_ids
            );
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("report: bad {what} {s:?}")))
}

impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut hash = None;
        let mut samples = None;
        let mut seed = None;
        let mut bins = Vec::new();
        let mut in_table = false;
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if line.starts_with("bin\t") {
                in_table = true;
                continue;
            }
            if !in_table {
                let (k, v) =
                    line.split_once(" = ").ok_or_else(|| Error::Format(format!("report: bad line {line:?}")))?;
                match k {
                    "extractor_hash" => hash = Some(v.to_string()),
                    "samples_per_bin" => samples = Some(parse_num(v, "sample count")?),
                    "seed" => seed = Some(parse_num(v, "seed")?),
                    other => return Err(Error::Format(format!("report: unknown key {other}"))),
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("report: bin row needs 8 fields: {line:?}")));
            }
            let bin = match f[0] {
                "ratio" => MaskBin::Ratio { lo: parse_num(f[1], "bin edge")?, hi: parse_num(f[2], "bin edge")? },
                "center" => MaskBin::Center,
                other => return Err(Error::Format(format!("report: unknown bin kind {other}"))),
            };
            bins.push(BinReport {
                bin,
                count: parse_num(f[3], "count")?,
                mean_ratio: parse_num(f[4], "mean ratio")?,
                fid: parse_num(f[5], "fid")?,
                u_ids: parse_num(f[6], "u_ids")?,
                p_ids: parse_num(f[7], "p_ids")?,
            });
        }
        Ok(Self {
            extractor_hash: hash.ok_or_else(|| Error::Format("report: missing extractor_hash".into()))?,
            samples_per_bin: samples.ok_or_else(|| Error::Format("report: missing samples_per_bin".into()))?,
            seed: seed.ok_or_else(|| Error::Format("report: missing seed".into()))?,
            bins,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], scale: &[f64]) -> FeatureSet {
        let d = mean.len();
        let data = (0..n * d)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                mean[i % d] + scale[i % d] * z
            })
            .collect::<Vec<f64>>();
        FeatureSet::new(n, d, data).unwrap()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(&mut rng, 300, &[0.0, 1.0, 2.0, -1.0], &[1.0, 2.0, 0.5, 1.5]);
        let b = gaussian(&mut rng, 300, &[0.5, 1.0, 2.0, 0.0], &[1.0, 1.0, 1.0, 1.0]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_rejects_mismatched_dims() {
        let a = FeatureSet::new(2, 1, vec![0.0, 1.0]).unwrap();
        let b = FeatureSet::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(fid(&a, &b).is_err());
        assert!(FeatureSet::new(1, 1, vec![0.0]).is_err());
        assert!(FeatureSet::new(2, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn ids_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 200, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        assert_eq!(ids_scores(&a, &a).unwrap(), (0.5, 0.5));
        let far = gaussian(&mut rng, 200, &[20.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        assert_eq!(ids_scores(&a, &far).unwrap(), (0.0, 0.0));
        let flat = FeatureSet::new(3, 2, vec![1.0; 6]).unwrap();
        assert!(matches!(ids_scores(&flat, &flat), Err(Error::Numeric(_))));
    }

    #[test]
    fn bins_are_disjoint_and_sampled_in_range() {
        let bins = default_bins();
        assert_eq!(bins.last(), Some(&MaskBin::Center));
        for r in [0.1, 0.15, 0.3, 0.6999] {
            assert_eq!(bins.iter().filter(|b| matches!(b, MaskBin::Ratio { .. }) && b.contains(r)).count(), 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let brush = BrushParams::scaled_to(64);
        for bin in &bins {
            for _ in 0..5 {
                let m = bin.sample(&mut rng, 64, &brush).unwrap();
                assert!(bin.contains(m.masked_ratio()));
            }
        }
        let c = MaskBin::Center.sample(&mut rng, 64, &brush).unwrap();
        assert!((c.masked_ratio() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn extractor_is_deterministic_and_batch_independent() {
        let ex = FeatureExtractor::desk(32).unwrap();
        assert_eq!(ex.hash(), FeatureExtractor::desk(32).unwrap().hash());
        assert_ne!(ex.hash(), FeatureExtractor::new(32, 32, &[16; 4], 1).unwrap().hash());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs = crate::nn::randn(&mut rng, (3, 3, 32, 32), DTYPE).unwrap();
        let all = extract_features(&imgs, &ex).unwrap();
        assert_eq!(all.dim(), 64);
        for i in 0..3 {
            let single = ops::to_vec_f64(&ex.embed(&imgs.narrow(0, i, 1).unwrap()).unwrap()).unwrap();
            assert_eq!(single.as_slice(), all.row(i));
        }
        let perm = Tensor::cat(&[imgs.narrow(0, 2, 1).unwrap(), imgs.narrow(0, 0, 2).unwrap()], 0).unwrap();
        let p = extract_features(&perm, &ex).unwrap();
        assert_eq!(p.row(0), all.row(2));
        assert_eq!(p.row(1), all.row(0));
    }

    #[test]
    fn report_text_round_trips() {
        let r = EvalReport {
            extractor_hash: "abc123".into(),
            samples_per_bin: 10,
            seed: 4,
            bins: vec![
                BinReport {
                    bin: MaskBin::Ratio { lo: 0.1, hi: 0.2 },
                    count: 10,
                    mean_ratio: 0.15,
                    fid: 1.25,
                    u_ids: 0.1,
                    p_ids: 0.05,
                },
                BinReport { bin: MaskBin::Center, count: 10, mean_ratio: 0.25, fid: 3.0 / 7.0, u_ids: 0.5, p_ids: 0.5 },
            ],
        };
        let back: EvalReport = r.to_text().parse().unwrap();
        assert_eq!(back, r);
        assert!("seed = 1".parse::<EvalReport>().is_err());
    }
}
