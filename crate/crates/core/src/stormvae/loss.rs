//! Reconstruction, KL and rendering losses.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::PosteriorStats;
use crate::error::{Error, Result};

/// Number of dyadic scales in the perceptual proxy.
pub const PERCEPTUAL_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub kl: f64,
    pub depth: f64,
    /// Weight of the rendering loss in the total.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.1,
            kl: 1e-6,
            depth: 0.05,
            lambda: 0.5,
        }
    }
}

fn grad_l1(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let d = (x - y)?;
    let gx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?.abs()?.mean_all()?;
    let gy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?.abs()?.mean_all()?;
    Ok((gx + gy)?)
}

/// Mean absolute difference of horizontal and vertical image gradients,
/// averaged over dyadic scales; images are `[N, 3, H, W]`.
pub fn perceptual_proxy(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape("perceptual proxy needs equal shapes"));
    }
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut terms = Vec::with_capacity(PERCEPTUAL_SCALES);
    for s in 0..PERCEPTUAL_SCALES {
        let (_, _, h, w) = a.dims4()?;
        if h < 2 || w < 2 {
            break;
        }
        terms.push(grad_l1(&a, &b)?);
        if s + 1 < PERCEPTUAL_SCALES && h >= 4 && w >= 4 && h % 2 == 0 && w % 2 == 0 {
            a = a.avg_pool2d(2)?;
            b = b.avg_pool2d(2)?;
        } else {
            break;
        }
    }
    if terms.is_empty() {
        return Ok(x.zeros_like()?.sum_all()?);
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// `½·mean(μ² + e^logvar − 1 − logvar)`.
pub fn kl_divergence(stats: &PosteriorStats) -> Result<Tensor> {
    let lv = &stats.logvar;
    let t = ((stats.mean.sqr()? + lv.exp()?)? - lv)?;
    Ok(((t - 1.0)?.mean_all()? * 0.5)?)
}

/// VAE loss components.
#[derive(Debug, Clone)]
pub struct VaeTerms {
    pub total: Tensor,
    pub mse: Tensor,
    pub perceptual: Tensor,
    pub kl: Tensor,
}

/// `MSE + w_p·perceptual + w_kl·KL` on `[N, 3, H, W]` images.
pub fn loss_vae(x: &Tensor, x_hat: &Tensor, stats: &PosteriorStats, w: &LossWeights) -> Result<VaeTerms> {
    let mse = (x - x_hat)?.sqr()?.mean_all()?;
    let perceptual = perceptual_proxy(x, x_hat)?;
    let kl = kl_divergence(stats)?;
    let total = ((&mse + (&perceptual * w.perceptual)?)? + (&kl * w.kl)?)?;
    Ok(VaeTerms {
        total,
        mse,
        perceptual,
        kl,
    })
}

/// Rendering loss components.
#[derive(Debug, Clone)]
pub struct StormTerms {
    pub total: Tensor,
    pub rgb: Tensor,
    pub depth: Tensor,
}

/// `MSE(rgb) + w_d·L1(depth)` with the depth term over finite ground truth only.
///
/// `rgb` and `gt_rgb` share a shape; `depth` and `gt_depth` share a shape.
pub fn loss_storm(rgb: &Tensor, gt_rgb: &Tensor, depth: &Tensor, gt_depth: &[f32], w_depth: f64) -> Result<StormTerms> {
    if rgb.dims() != gt_rgb.dims() || depth.elem_count() != gt_depth.len() {
        return Err(Error::shape("render and ground-truth shapes differ"));
    }
    let rgb_term = (rgb - gt_rgb)?.sqr()?.mean_all()?;
    let mask: Vec<f32> = gt_depth.iter().map(|d| if d.is_finite() && *d > 0.0 { 1.0 } else { 0.0 }).collect();
    let count: f32 = mask.iter().sum();
    let depth_term = if count > 0.0 {
        let gt: Vec<f32> = gt_depth.iter().map(|&d| if d.is_finite() { d } else { 0.0 }).collect();
        let dev = depth.device();
        let gt = Tensor::from_vec(gt, depth.shape(), dev)?.to_dtype(depth.dtype())?;
        let mask = Tensor::from_vec(mask, depth.shape(), dev)?.to_dtype(depth.dtype())?;
        ((depth - gt)?.abs()?.mul(&mask)?.sum_all()? / count as f64)?
    } else {
        depth.zeros_like()?.sum_all()?
    };
    let total = (&rgb_term + (&depth_term * w_depth)?)?;
    Ok(StormTerms {
        total,
        rgb: rgb_term,
        depth: depth_term,
    })
}

/// `l_vae + λ·l_storm`.
pub fn total_loss(l_vae: &Tensor, l_storm: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_vae + (l_storm * lambda)?)?)
}

/// Scalar value of a 0-d tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum(D::Minus1)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn stats(mean: f32, logvar: f32) -> PosteriorStats {
        PosteriorStats {
            mean: Tensor::full(mean, (2, 4, 2, 2), &Device::Cpu).unwrap(),
            logvar: Tensor::full(logvar, (2, 4, 2, 2), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let x = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let l = loss_vae(&x, &x, &stats(0.0, 0.0), &LossWeights::default()).unwrap();
        assert_eq!(scalar(&l.total).unwrap(), 0.0);
        assert_eq!(scalar(&perceptual_proxy(&x, &x).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        assert!((scalar(&kl_divergence(&stats(1.0, 0.0)).unwrap()).unwrap() - 0.5).abs() < 1e-7);
        let lv = 0.7f64;
        let expect = 0.5 * (0.25 + lv.exp() - 1.0 - lv);
        assert!((scalar(&kl_divergence(&stats(0.5, lv as f32)).unwrap()).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn perceptual_matches_loop_oracle() {
        let x = Tensor::rand(0f32, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let y = Tensor::rand(0f32, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let got = scalar(&perceptual_proxy(&x, &y).unwrap()).unwrap();
        let mut d: Vec<Vec<f64>> = {
            let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            (0..8).map(|r| (0..8).map(|c| (a[r * 8 + c] - b[r * 8 + c]) as f64).collect()).collect()
        };
        let mut total = 0.0;
        for _ in 0..3 {
            let n = d.len();
            let (mut gx, mut gy) = (0.0, 0.0);
            for r in 0..n {
                for c in 0..n - 1 {
                    gx += (d[r][c + 1] - d[r][c]).abs();
                    gy += (d[c + 1][r] - d[c][r]).abs();
                }
            }
            total += (gx + gy) / (n * (n - 1)) as f64;
            d = (0..n / 2)
                .map(|r| (0..n / 2).map(|c| (d[2 * r][2 * c] + d[2 * r + 1][2 * c] + d[2 * r][2 * c + 1] + d[2 * r + 1][2 * c + 1]) / 4.0).collect())
                .collect();
        }
        assert!((got - total / 3.0).abs() < 1e-6, "{got} vs {}", total / 3.0);
    }

    #[test]
    fn depth_term_is_l1_over_finite_pixels() {
        let rgb = t(vec![0.5; 12], &[1, 2, 2, 3]);
        let gt_d = vec![2.0, f32::INFINITY, 4.0, 5.0];
        let biased = t(vec![3.0, 100.0, 5.0, 6.0], &[1, 2, 2]);
        let l = loss_storm(&rgb, &rgb, &biased, &gt_d, 0.05).unwrap();
        assert!((scalar(&l.total).unwrap() - 0.05).abs() < 1e-7);
        let l2 = loss_storm(&rgb, &rgb, &biased, &gt_d, 0.1).unwrap();
        assert!((scalar(&l2.total).unwrap() - 2.0 * scalar(&l.total).unwrap()).abs() < 1e-7);
        let exact = t(vec![2.0, 7.0, 4.0, 5.0], &[1, 2, 2]);
        assert_eq!(scalar(&loss_storm(&rgb, &rgb, &exact, &gt_d, 0.05).unwrap().total).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let s = |v: f32| Tensor::new(v, &Device::Cpu).unwrap();
        assert_eq!(scalar(&total_loss(&s(1.0), &s(2.0), 0.5).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&total_loss(&s(0.7), &s(0.0), 0.5).unwrap()).unwrap(), 0.7f32 as f64);
        assert_eq!(scalar(&total_loss(&s(0.0), &s(3.0), 0.5).unwrap()).unwrap(), 1.5);
    }
}
