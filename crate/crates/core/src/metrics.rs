//! FID, LPIPS / Intra-LPIPS and embedding cosine similarity over a pluggable frozen
//! feature extractor.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::substitution::FeatureEncoder;
use crate::tensor::Tensor;

/// Allowed asymmetry of a covariance-like input, relative to `max(1, max |a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `−EIGEN_CLIP · max(1, max |λ|)` mean the input is not PSD.
pub const EIGEN_CLIP: f64 = 1e-8;
/// Norm floor when unit-normalising channel vectors for LPIPS.
pub const LPIPS_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance of the rows of an `[N, D]` matrix.
pub fn summarize(features: &Tensor) -> Result<GaussianSummary> {
    ensure!(features.shape().len() == 2, InvalidInput, "features must be [N, D], got {:?}", features.shape());
    let (n, d) = (features.shape()[0], features.shape()[1]);
    ensure!(n >= 2, InvalidInput, "need at least 2 samples, got {n}");
    ensure!(features.all_finite(), InvalidInput, "features contain non-finite values");
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    symmetrize(&mut sigma);
    Ok(GaussianSummary { mu, sigma, n })
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    ensure!(a.is_square(), InvalidInput, "matrix is {}x{}, not square", a.nrows(), a.ncols());
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    ensure!(
        asym <= SYMMETRY_TOL * scale,
        InvalidInput,
        "matrix is not symmetric (max |A - Aᵀ| = {asym:e})"
    );
    Ok(())
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition, with
/// eigenvalues in the noise band clipped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    ensure!(
        min >= -EIGEN_CLIP * scale,
        InvalidInput,
        "matrix is not positive semi-definite (eigenvalue {min:e})"
    );
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let mut b = q * DMatrix::from_diagonal(&roots) * q.transpose();
    symmetrize(&mut b);
    Ok(b)
}

/// Fréchet distance between two Gaussian summaries, using the symmetric form
/// `Tr(Σ₁ + Σ₂ − 2·sqrtm(Σ₁^{1/2} Σ₂ Σ₁^{1/2}))`.
pub fn fid(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    ensure!(
        a.mu.len() == b.mu.len(),
        InvalidInput,
        "feature dimensions differ: {} vs {}",
        a.mu.len(),
        b.mu.len()
    );
    let root_a = sqrtm_psd(&a.sigma)?;
    let mut inner = &root_a * &b.sigma * &root_a;
    symmetrize(&mut inner);
    let cross = sqrtm_psd(&inner)?.trace();
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    ensure!(value.is_finite(), Numerical, "FID is not finite");
    Ok(value.max(0.0))
}

fn stack_images(images: &[Tensor], what: &str) -> Result<Tensor> {
    ensure!(!images.is_empty(), InvalidInput, "{what}: empty image set");
    ensure!(
        images[0].shape().len() == 3,
        InvalidInput,
        "{what}: images must be CHW, got {:?}",
        images[0].shape()
    );
    Tensor::stack(images).map_err(|_| Error::InvalidInput(format!("{what}: images differ in shape")))
}

/// FID between extractor embeddings of two image sets.
pub fn fid_images(real: &[Tensor], fake: &[Tensor], extractor: &dyn FeatureEncoder) -> Result<f64> {
    let a = summarize(&extractor.embed(&stack_images(real, "real set")?)?)?;
    let b = summarize(&extractor.embed(&stack_images(fake, "generated set")?)?)?;
    fid(&a, &b)
}

/// Channel-unit-normalised taps of one image, ready for LPIPS comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct LpipsFeatures {
    layers: Vec<Tensor>,
}

/// Normalised taps for each image of a set (one extractor pass over the batch).
pub fn lpips_features(images: &[Tensor], extractor: &dyn FeatureEncoder) -> Result<Vec<LpipsFeatures>> {
    let batch = stack_images(images, "lpips")?;
    let taps = extractor.tap_tensors(&batch)?;
    ensure!(!taps.is_empty(), InvalidInput, "extractor exposes no tap layers");
    Ok((0..images.len())
        .map(|i| LpipsFeatures {
            layers: taps.iter().map(|t| unit_channels(&t.index_outer(i))).collect(),
        })
        .collect())
}

fn unit_channels(t: &Tensor) -> Tensor {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..hw {
        let norm = (0..c).map(|k| d[k * hw + p].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            out[k * hw + p] = d[k * hw + p] / (norm + LPIPS_EPS);
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// LPIPS between two prepared feature sets. `weights[l][c]` scales channel `c` of
/// layer `l`; `None` means all ones.
pub fn lpips_distance(a: &LpipsFeatures, b: &LpipsFeatures, weights: Option<&[Vec<f64>]>) -> f64 {
    a.layers
        .iter()
        .zip(&b.layers)
        .enumerate()
        .map(|(l, (ya, yb))| {
            let (c, hw) = (ya.shape()[0], ya.shape()[1] * ya.shape()[2]);
            let mut acc = 0.0;
            for k in 0..c {
                let w = weights.map_or(1.0, |w| w[l][k]);
                for p in 0..hw {
                    let diff = w * (ya.data()[k * hw + p] - yb.data()[k * hw + p]);
                    acc += diff * diff;
                }
            }
            acc / hw as f64
        })
        .sum()
}

pub fn lpips(x: &Tensor, x0: &Tensor, extractor: &dyn FeatureEncoder) -> Result<f64> {
    ensure!(
        x.shape() == x0.shape(),
        InvalidInput,
        "lpips shape mismatch: {:?} vs {:?}",
        x.shape(),
        x0.shape()
    );
    let f = lpips_features(&[x.clone(), x0.clone()], extractor)?;
    Ok(lpips_distance(&f[0], &f[1], extractor.layer_weights()))
}

/// Result of clustering generated images around their nearest center.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraLpips {
    /// Center index for each generated image.
    pub assignment: Vec<usize>,
    /// Mean pairwise LPIPS per cluster, `None` for clusters with fewer than 2 members.
    pub per_cluster: Vec<Option<f64>>,
    /// Mean over non-trivial clusters; `None` when every cluster is trivial.
    pub value: Option<f64>,
}

/// Assigns each generated image to its LPIPS-nearest center (ties go to the lower
/// index) and averages pairwise LPIPS inside each cluster.
pub fn intra_lpips(generated: &[Tensor], centers: &[Tensor], extractor: &dyn FeatureEncoder) -> Result<IntraLpips> {
    ensure!(generated.len() >= 2, InvalidInput, "intra-LPIPS needs at least 2 generated images");
    ensure!(!centers.is_empty(), InvalidInput, "intra-LPIPS needs at least 1 center");
    ensure!(
        generated[0].shape() == centers[0].shape(),
        InvalidInput,
        "generated images {:?} and centers {:?} differ in shape",
        generated[0].shape(),
        centers[0].shape()
    );
    let all: Vec<Tensor> = generated.iter().chain(centers).cloned().collect();
    let feats = lpips_features(&all, extractor)?;
    let (gen, cen) = feats.split_at(generated.len());
    let w = extractor.layer_weights();
    let assignment: Vec<usize> = gen
        .iter()
        .map(|g| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in cen.iter().enumerate() {
                let d = lpips_distance(g, c, w);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let per_cluster: Vec<Option<f64>> = (0..centers.len())
        .map(|c| {
            let m = members.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            if m.len() < 2 {
                return None;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    sum += lpips_distance(&gen[i], &gen[j], w);
                    count += 1;
                }
            }
            Some(sum / count as f64)
        })
        .collect();
    let defined: Vec<f64> = per_cluster.iter().flatten().copied().collect();
    let value = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(IntraLpips {
        assignment,
        per_cluster,
        value,
    })
}

/// Mean cosine similarity between pooled embeddings of index-paired images.
pub fn feature_cosine(set_a: &[Tensor], set_b: &[Tensor], extractor: &dyn FeatureEncoder) -> Result<f64> {
    let n = set_a.len().min(set_b.len());
    ensure!(n >= 1, InvalidInput, "feature_cosine needs non-empty sets");
    let ea = extractor.embed(&stack_images(&set_a[..n], "set a")?)?;
    let eb = extractor.embed(&stack_images(&set_b[..n], "set b")?)?;
    let d = ea.shape()[1];
    let total: f64 = ea
        .data()
        .chunks(d)
        .zip(eb.data().chunks(d))
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny).max(f64::MIN_POSITIVE)
        })
        .sum();
    Ok(total / n as f64)
}

/// Metric values plus provenance. `None` marks a metric that was not requested, or
/// (for Intra-LPIPS) one that is undefined because every cluster is trivial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub extractor: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub fid: Option<f64>,
    pub intra_lpips: Option<f64>,
    pub feature_cosine: Option<f64>,
}

/// Evaluates the named metrics (`fid`, `intra_lpips`, `feature_cosine`) of a generated
/// set against real images. The real images double as Intra-LPIPS cluster centers.
pub fn evaluate(
    real: &[Tensor],
    fake: &[Tensor],
    metrics: &[String],
    extractor: &dyn FeatureEncoder,
) -> Result<MetricReport> {
    ensure!(!metrics.is_empty(), Config, "no metrics requested");
    let mut report = MetricReport {
        extractor: extractor.id().to_string(),
        n_real: real.len(),
        n_fake: fake.len(),
        fid: None,
        intra_lpips: None,
        feature_cosine: None,
    };
    for m in metrics {
        match m.as_str() {
            "fid" => report.fid = Some(fid_images(real, fake, extractor)?),
            "intra_lpips" => report.intra_lpips = intra_lpips(fake, real, extractor)?.value,
            "feature_cosine" => report.feature_cosine = Some(feature_cosine(real, fake, extractor)?),
            other => return Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substitution::FrozenConvEncoder;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(data: &[&[f64]]) -> Tensor {
        let d = data[0].len();
        Tensor::new(vec![data.len(), d], data.concat()).unwrap()
    }

    #[test]
    fn two_point_summary() {
        let s = summarize(&rows(&[&[0.0, 0.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(summarize(&rows(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn duplicated_batch_rescales_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let once: Vec<&[f64]> = base.iter().map(Vec::as_slice).collect();
        let twice: Vec<&[f64]> = once.iter().chain(&once).copied().collect();
        let (a, b) = (summarize(&rows(&once)).unwrap(), summarize(&rows(&twice)).unwrap());
        assert_abs_diff_eq!((&a.mu - &b.mu).amax(), 0.0, epsilon = 1e-15);
        // Σ_dup = Σ · (n − 1)·2 / (2n − 1)
        let n = 5.0;
        let expected = &a.sigma * (2.0 * (n - 1.0) / (2.0 * n - 1.0));
        assert!((b.sigma - expected).amax() < 1e-14);
    }

    #[test]
    fn constant_batch_has_zero_covariance() {
        let s = summarize(&rows(&[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]])).unwrap();
        assert_eq!(s.sigma.amax(), 0.0);
    }

    #[test]
    fn sqrtm_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&id).unwrap() - &id).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-12);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&asym), Err(Error::InvalidInput(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(sqrtm_psd(&neg).is_err());
    }

    #[test]
    fn sqrtm_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
            let a = m.transpose() * &m;
            let b = sqrtm_psd(&a).unwrap();
            let err = (&b * &b - &a).norm() / a.norm().max(1.0);
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn fid_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = Tensor::new(vec![10, 4], data).unwrap();
        let a = summarize(&feats).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        let shift = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let b = GaussianSummary {
            mu: &a.mu + &shift,
            ..a.clone()
        };
        assert!((fid(&a, &b).unwrap() - shift.norm_squared()).abs() < 1e-8);
        let c = GaussianSummary {
            mu: DVector::zeros(3),
            sigma: DMatrix::identity(3, 3),
            n: 2,
        };
        assert!(fid(&a, &c).is_err());
    }

    fn encoder() -> FrozenConvEncoder {
        FrozenConvEncoder::new("frozen-conv-micro", 3).unwrap()
    }

    fn image(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![3, 6, 6], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight-line LPIPS recomputation from raw taps.
    fn lpips_oracle(x: &Tensor, y: &Tensor, enc: &FrozenConvEncoder) -> f64 {
        let tx = enc.tap_tensors(&Tensor::stack(&[x.clone()]).unwrap()).unwrap();
        let ty = enc.tap_tensors(&Tensor::stack(&[y.clone()]).unwrap()).unwrap();
        let mut total = 0.0;
        for (a, b) in tx.iter().zip(&ty) {
            let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
            let mut layer = 0.0;
            for p in 0..h * w {
                let va: Vec<f64> = (0..c).map(|k| a.data()[k * h * w + p]).collect();
                let vb: Vec<f64> = (0..c).map(|k| b.data()[k * h * w + p]).collect();
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                layer += va.iter().zip(&vb).map(|(p, q)| (p / na - q / nb).powi(2)).sum::<f64>();
            }
            total += layer / (h * w) as f64;
        }
        total
    }

    #[test]
    fn lpips_matches_oracle_and_is_a_pseudometric() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (x, y) = (image(&mut rng), image(&mut rng));
            let d = lpips(&x, &y, &enc).unwrap();
            assert!((d - lpips_oracle(&x, &y, &enc)).abs() < 1e-10);
            assert!((d - lpips(&y, &x, &enc).unwrap()).abs() < 1e-10);
            assert!(d >= 0.0);
            assert_eq!(lpips(&x, &x, &enc).unwrap(), 0.0);
        }
        let small = Tensor::zeros(&[3, 4, 4]);
        assert!(lpips(&image(&mut rng), &small, &enc).is_err());
    }

    #[test]
    fn intra_lpips_edge_cases() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = image(&mut rng);
        let same = vec![x.clone(); 4];
        assert_eq!(intra_lpips(&same, &[image(&mut rng)], &enc).unwrap().value, Some(0.0));

        let gen: Vec<Tensor> = (0..5).map(|_| image(&mut rng)).collect();
        let one = intra_lpips(&gen, &[image(&mut rng)], &enc).unwrap();
        let mut pairs = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                pairs.push(lpips(&gen[i], &gen[j], &enc).unwrap());
            }
        }
        let global = pairs.iter().sum::<f64>() / pairs.len() as f64;
        assert!((one.value.unwrap() - global).abs() < 1e-10);

        // two generated images, each its own center: every cluster is trivial
        let split = intra_lpips(&gen[..2], &gen[..2], &enc).unwrap();
        assert_eq!(split.assignment, vec![0, 1]);
        assert_eq!(split.value, None);
        assert!(intra_lpips(&gen[..1], &gen[..1], &enc).is_err());
        assert!(intra_lpips(&gen, &[], &enc).is_err());
    }

    #[test]
    fn feature_cosine_examples() {
        let enc = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a: Vec<Tensor> = (0..4).map(|_| image(&mut rng)).collect();
        assert!((feature_cosine(&a, &a, &enc).unwrap() - 1.0).abs() < 1e-9);
        assert!(feature_cosine(&a, &[], &enc).is_err());
        let b: Vec<Tensor> = (0..6).map(|_| image(&mut rng)).collect();
        let ea = enc.embed(&Tensor::stack(&a).unwrap()).unwrap();
        let eb = enc.embed(&Tensor::stack(&b[..4]).unwrap()).unwrap();
        let d = ea.shape()[1];
        let mut expected = 0.0;
        for i in 0..4 {
            let (x, y) = (&ea.data()[i * d..(i + 1) * d], &eb.data()[i * d..(i + 1) * d]);
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            expected += dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        assert!((feature_cosine(&a, &b, &enc).unwrap() - expected / 4.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn fid_symmetric_nonnegative_and_scales_quadratically(seed in 0u64..500, k in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (fa, fb) = (draw(12), draw(9));
            let (a, b) = (summarize(&fa).unwrap(), summarize(&fb).unwrap());
            let ab = fid(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8);
            let (sa, sb) = (summarize(&fa.map(|v| v * k)).unwrap(), summarize(&fb.map(|v| v * k)).unwrap());
            let scaled = fid(&sa, &sb).unwrap();
            prop_assert!((scaled - k * k * ab).abs() <= 1e-6 * (k * k * ab).max(1e-12));
        }
    }
}
