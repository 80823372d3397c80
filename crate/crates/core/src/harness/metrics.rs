//! Image, depth and distribution metrics, all in `f64`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to covariances that are not positive definite.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Metric(format!("psnr needs equal non-empty inputs, got {} and {}", x.len(), y.len())));
    }
    let mse = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

/// Ground-truth/prediction pairs selected by `mask` with finite positive
/// ground truth.
fn depth_pairs(d: &[f32], d_hat: &[f32], mask: &[bool]) -> Result<Vec<(f64, f64)>> {
    if d.len() != d_hat.len() || d.len() != mask.len() {
        return Err(Error::Metric("depth, prediction and mask lengths differ".into()));
    }
    let pairs: Vec<(f64, f64)> = d
        .iter()
        .zip(d_hat)
        .zip(mask)
        .filter(|((&g, _), &m)| m && g.is_finite() && g > 0.0)
        .map(|((&g, &p), _)| (g as f64, p as f64))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Metric("empty depth mask".into()));
    }
    Ok(pairs)
}

/// Depth root-mean-square error, in scene units.
pub fn drmse(d: &[f32], d_hat: &[f32], mask: &[bool]) -> Result<f64> {
    let p = depth_pairs(d, d_hat, mask)?;
    Ok((p.iter().map(|(g, e)| (g - e).powi(2)).sum::<f64>() / p.len() as f64).sqrt())
}

/// Mean of `|d − d̂| / d`.
pub fn absrel(d: &[f32], d_hat: &[f32], mask: &[bool]) -> Result<f64> {
    let p = depth_pairs(d, d_hat, mask)?;
    Ok(p.iter().map(|(g, e)| (g - e).abs() / g).sum::<f64>() / p.len() as f64)
}

/// Fraction of pixels with `max(d/d̂, d̂/d) < 1.25`.
pub fn delta1(d: &[f32], d_hat: &[f32], mask: &[bool]) -> Result<f64> {
    let p = depth_pairs(d, d_hat, mask)?;
    let hits = p
        .iter()
        .filter(|(g, e)| *e > 0.0 && (g / e).max(e / g) < 1.25)
        .count();
    Ok(hits as f64 / p.len() as f64)
}

/// Mean and unbiased covariance of row features.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least two feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Metric("feature vectors must share a positive length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let min = SymmetricEigen::new((cov + cov.transpose()) * 0.5).eigenvalues.min();
    if min <= 0.0 {
        log::info!("singular covariance (min eigenvalue {min:e}); adding ridge {FRECHET_RIDGE:e}");
        cov + DMatrix::identity(cov.nrows(), cov.ncols()) * FRECHET_RIDGE
    } else {
        cov.clone()
    }
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, using
/// `tr((Σ₁Σ₂)^{1/2}) = tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Metric("Fréchet statistics have mismatched dimensions".into()));
    }
    let s1 = regularize(s1);
    let s2 = regularize(s2);
    let r1 = sym_sqrt(&s1);
    let cross = sym_sqrt(&(&r1 * &s2 * &r1));
    let d2 = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0))
}

/// Fréchet distance between two sets of feature vectors.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = feature_stats(a)?;
    let (m2, s2) = feature_stats(b)?;
    frechet_from_stats(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub split: String,
    pub seed: u64,
}

/// Aggregate metrics with a per-clip breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_clip: BTreeMap<String, BTreeMap<String, f64>>,
    pub meta: ReportMeta,
    /// Configuration echo.
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Averages every per-clip metric into [`Self::metrics`], keeping
    /// existing aggregate entries.
    pub fn aggregate(&mut self) {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for m in self.per_clip.values() {
            for (k, v) in m {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        for (k, (s, n)) in sums {
            self.metrics.entry(k).or_insert(s / n as f64);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.metrics.iter().chain(self.per_clip.values().flat_map(|m| m.iter()));
        for (k, v) in all {
            if !v.is_finite() {
                return Err(Error::Metric(format!("metric {k} is not finite")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(1.0..50.0)).collect()
    }

    #[test]
    fn identical_depths_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = depth(&mut rng, 64);
        let m = vec![true; 64];
        assert_eq!(drmse(&d, &d, &m).unwrap(), 0.0);
        assert_eq!(absrel(&d, &d, &m).unwrap(), 0.0);
        assert_eq!(delta1(&d, &d, &m).unwrap(), 1.0);
    }

    #[test]
    fn uniform_scaling_boundaries() {
        let d: Vec<f32> = (1..=64).map(|i| i as f32 * 0.5).collect();
        let m = vec![true; 64];
        let s12: Vec<f32> = d.iter().map(|x| x * 1.2).collect();
        let s13: Vec<f32> = d.iter().map(|x| x * 1.3).collect();
        assert_eq!(delta1(&d, &s12, &m).unwrap(), 1.0);
        assert!((absrel(&d, &s12, &m).unwrap() - 0.2).abs() < 1e-6);
        assert_eq!(delta1(&d, &s13, &m).unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_are_errors() {
        let d = vec![1.0f32; 4];
        assert!(drmse(&d, &d, &[false; 4]).is_err());
        assert!(delta1(&[f32::INFINITY; 4], &d, &[true; 4]).is_err());
        assert!(absrel(&d, &d[..3], &[true; 4]).is_err());
    }

    #[test]
    fn psnr_closed_form() {
        let x = vec![0.5f32; 16];
        let y = vec![0.6f32; 16];
        let expect = 10.0 * (1.0 / (0.1f64).powi(2)).log10();
        assert!((psnr(&x, &y).unwrap() - expect).abs() < 1e-5);
        assert!(psnr(&x, &x).unwrap().is_infinite());
    }

    #[test]
    fn frechet_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.random_range(-0.5..2.0)).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_mean_offset_closed_form() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let mu1 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let mu2 = DVector::from_vec(vec![0.0, 1.7, 0.0]);
        let d = frechet_from_stats(&mu1, &eye, &mu2, &eye).unwrap();
        assert!((d - 1.7f64.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn diagonal_covariances_closed_form() {
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let s2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
        let z = DVector::zeros(2);
        let d = frechet_from_stats(&z, &s1, &z, &s2).unwrap();
        assert!((d - ((2.0f64 - 1.0).powi(2) + (1.0f64 - 3.0).powi(2))).abs() < 1e-9);
    }

    #[test]
    fn too_few_features_are_rejected() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn report_aggregates_per_clip_means() {
        let mut r = MetricsReport::default();
        r.per_clip.insert("a".into(), BTreeMap::from([("psnr".to_string(), 20.0)]));
        r.per_clip.insert("b".into(), BTreeMap::from([("psnr".to_string(), 30.0)]));
        r.aggregate();
        assert_eq!(r.metrics["psnr"], 25.0);
        r.validate().unwrap();
    }
}
