use candle_core::Tensor;
use exemplar_inpaint::data::Dataset;
use exemplar_inpaint::evaluation::{
    default_bins, evaluate, fid, ids_scores, EvalOptions, EvalReport, FeatureExtractor, FeatureSet, Inpainter, MaskBin,
};
use exemplar_inpaint::Result;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

/// Samples whose empirical mean and (unbiased) covariance are exactly `mu`, `sigma`.
fn exact_moments(rng: &mut ChaCha8Rng, n: usize, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> FeatureSet {
    let d = mu.len();
    let mut x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let white = cov.cholesky().unwrap().l().try_inverse().unwrap();
    let color = sigma.clone().cholesky().unwrap().l();
    let y = &x * white.transpose() * color.transpose();
    let mut data = Vec::with_capacity(n * d);
    for r in y.row_iter() {
        data.extend(r.iter().zip(mu.iter()).map(|(a, m)| a + m));
    }
    FeatureSet::new(n, d, data).unwrap()
}

fn spd2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, b, c])
}

#[test]
fn gaussian_fid_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        (
            DVector::from_vec(vec![0.0, 0.0]),
            spd2(1.0, 0.0, 1.0),
            DVector::from_vec(vec![0.0, 0.0]),
            spd2(1.0, 0.0, 1.0),
        ),
        (
            DVector::from_vec(vec![1.0, -2.0]),
            spd2(2.0, 0.3, 1.0),
            DVector::from_vec(vec![0.5, 0.5]),
            spd2(0.5, -0.2, 3.0),
        ),
        (
            DVector::from_vec(vec![3.0, 0.0]),
            spd2(4.0, 1.9, 1.0),
            DVector::from_vec(vec![0.0, 1.0]),
            spd2(1.0, 0.0, 0.25),
        ),
    ];
    for (mu_a, sa, mu_b, sb) in cases {
        let a = exact_moments(&mut rng, 500, &mu_a, &sa);
        let b = exact_moments(&mut rng, 700, &mu_b, &sb);
        // For 2x2 matrices with positive eigenvalues, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
        let m = &sa * &sb;
        let tr_sqrt = (m.trace() + 2.0 * m.determinant().sqrt()).sqrt();
        let expected = (&mu_a - &mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
        let got = fid(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-3, "fid {got} vs closed form {expected}");
    }
}

#[test]
fn fid_is_zero_on_identical_sets_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = exact_moments(&mut rng, 50, &DVector::from_vec(vec![1.0, 2.0]), &spd2(1.0, 0.5, 2.0));
    let b = exact_moments(&mut rng, 80, &DVector::from_vec(vec![0.0, 2.0]), &spd2(3.0, -0.5, 1.0));
    assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
}

#[test]
fn unpaired_ids_tracks_bayes_error() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for shift in [0.5f64, 1.0, 2.0] {
        let n = 3000;
        let mut real = Vec::with_capacity(2 * n);
        let mut fake = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (a, b, c, d): (f64, f64, f64, f64) = (
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            real.extend([a, b]);
            fake.extend([c + shift, d]);
        }
        let real = FeatureSet::new(n, 2, real).unwrap();
        let fake = FeatureSet::new(n, 2, fake).unwrap();
        let (u, p) = ids_scores(&real, &fake).unwrap();
        let bayes = normal.cdf(-shift / 2.0);
        assert!((u - bayes).abs() < 0.03, "shift {shift}: U-IDS {u} vs Bayes error {bayes}");
        assert!((0.0..=0.5).contains(&p));
    }
}

#[test]
fn ids_edge_cases_survive_linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mk = |rng: &mut ChaCha8Rng, off: f64| {
        let v: Vec<f64> = (0..300).map(|i| { let z: f64 = StandardNormal.sample(rng); z } + if i % 3 == 0 { off } else { 0.0 }).collect();
        FeatureSet::new(100, 3, v).unwrap()
    };
    let real = mk(&mut rng, 0.0);
    let far = mk(&mut rng, 50.0);
    let map = |f: &FeatureSet| {
        let m = DMatrix::from_row_slice(f.rows(), 3, f.as_slice())
            * DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 1.0, -3.0, 1.0, 0.0, 1.0]);
        FeatureSet::new(f.rows(), 3, m.transpose().as_slice().to_vec()).unwrap()
    };
    for (r, f) in [(real.clone(), far.clone()), (map(&real), map(&far))] {
        assert_eq!(ids_scores(&r, &f).unwrap(), (0.0, 0.0));
        assert_eq!(ids_scores(&r, &r).unwrap(), (0.5, 0.5));
    }
}

struct GroundTruth;

impl Inpainter for GroundTruth {
    fn inpaint(&self, image: &Tensor, _mask: &Tensor, _exemplar: &Tensor, _seed: u64) -> Result<Tensor> {
        Ok(image.clone())
    }
}

/// Pastes the exemplar into the hole.
struct CopyExemplar;

impl Inpainter for CopyExemplar {
    fn inpaint(&self, image: &Tensor, mask: &Tensor, exemplar: &Tensor, _seed: u64) -> Result<Tensor> {
        let keep = mask.affine(-1.0, 1.0)?;
        Ok((image.broadcast_mul(&keep)? + exemplar.broadcast_mul(mask)?)?)
    }
}

#[test]
fn identity_oracle_scores_zero_in_every_bin() {
    let data = Dataset::synthetic(32, 0, 24, 6, 1).unwrap();
    let ex = FeatureExtractor::desk(32).unwrap();
    let bins = default_bins();
    let opts = EvalOptions { batch_size: 7, ..EvalOptions::for_resolution(32) };
    let report = evaluate(&GroundTruth, &data, &ex, &bins, 20, &opts).unwrap();
    assert_eq!(report.bins.len(), bins.len());
    assert!(report.bin(&MaskBin::Center).is_some());
    assert_eq!(report.extractor_hash, ex.hash());
    for b in &report.bins {
        assert!(b.fid.abs() < 1e-6, "{}: {}", b.bin.label(), b.fid);
        assert_eq!((b.u_ids, b.p_ids), (0.5, 0.5));
        assert_eq!(b.count, 20);
        assert!(b.bin.contains(b.mean_ratio));
    }
    let back: EvalReport = report.to_text().parse().unwrap();
    assert_eq!(back, report);

    let pasted = evaluate(&CopyExemplar, &data, &ex, &bins, 20, &opts).unwrap();
    assert_eq!(pasted, evaluate(&CopyExemplar, &data, &ex, &bins, 20, &opts).unwrap());
    assert!(pasted.bins.iter().all(|b| b.fid > 0.0));
}

#[test]
fn evaluation_rejects_too_few_samples() {
    let data = Dataset::synthetic(32, 0, 4, 2, 1).unwrap();
    let ex = FeatureExtractor::desk(32).unwrap();
    let opts = EvalOptions::for_resolution(32);
    assert!(evaluate(&GroundTruth, &data, &ex, &default_bins(), 1, &opts).is_err());
    assert!(evaluate(&GroundTruth, &data, &ex, &default_bins(), 5, &opts).is_err());
}
