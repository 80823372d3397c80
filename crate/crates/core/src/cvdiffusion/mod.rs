//! Rectified-flow latent video transformer.
//!
//! The model regresses `z₀ − ε` from the interpolant `z_t = (1 − t)·z₀ + t·ε`
//! over a `[T, V, C, h, w]` latent grid. Each unit of the block stack runs a
//! spatial, a temporal and a cross-view transformer block, regrouping the
//! tokens between them (see [`reshape`]). Box and lane rasters and a
//! reference-frame indicator are concatenated to the input channels; text
//! and the flow time modulate every block through adaptive layer norm.

pub mod model;
pub mod reshape;
pub mod sampler;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use model::{CvDit, VelocityModel};
pub use reshape::{reshape_crossview, reshape_spatial, reshape_temporal, Layout};
pub use sampler::{autoregress, initial_noise, plan_windows, sample, OraclePredictor, SampleOptions};

use crate::error::{Error, Result};
use crate::synthworld::scene::vocab;
use crate::synthworld::MultiViewClip;

/// Number of control channels: box raster, lane raster, reference indicator.
pub const CONTROL_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDistribution {
    #[default]
    Uniform,
    LogitNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub latent_channels: usize,
    pub units: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub max_frames: usize,
    /// Largest latent side supported by the spatial positional table.
    pub max_latent_side: usize,
    pub vocab_size: usize,
    pub p_drop_temporal: f64,
    pub p_drop_crossview: f64,
    /// Allow both appended block kinds to be dropped in the same step.
    pub allow_both_dropped: bool,
    pub cond_dropout: f64,
    pub guidance: f64,
    pub steps: usize,
    pub time_distribution: TimeDistribution,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            units: 4,
            width: 192,
            heads: 6,
            patch: 2,
            max_frames: 19,
            max_latent_side: 16,
            vocab_size: vocab::SIZE,
            p_drop_temporal: 0.1,
            p_drop_crossview: 0.1,
            allow_both_dropped: false,
            cond_dropout: 0.1,
            guidance: 1.0,
            steps: 50,
            time_distribution: TimeDistribution::Uniform,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("diffusion width must be divisible by its heads"));
        }
        if self.patch == 0 || self.units == 0 {
            return Err(Error::config("patch size and unit count must be positive"));
        }
        for p in [self.p_drop_temporal, self.p_drop_crossview, self.cond_dropout] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("probabilities must lie in [0, 1]"));
            }
        }
        if !self.allow_both_dropped && self.p_drop_temporal + self.p_drop_crossview > 1.0 {
            return Err(Error::config("exclusive block dropout needs p_temporal + p_crossview ≤ 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("sampling needs at least one step"));
        }
        Ok(())
    }
}

/// Which appended block kinds run in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMask {
    pub temporal: bool,
    pub cross_view: bool,
}

impl BlockMask {
    pub const ALL: BlockMask = BlockMask {
        temporal: true,
        cross_view: true,
    };
    pub const SPATIAL_ONLY: BlockMask = BlockMask {
        temporal: false,
        cross_view: false,
    };
}

/// Per-step block dropout. Unless both may drop together, one uniform draw
/// is split into `[0, p_T)` (temporal off), `[p_T, p_T + p_V)` (cross-view
/// off) and the rest (all on), so the marginal rates are exactly `p_T` and `p_V`.
pub fn block_dropout(cfg: &DiffusionConfig, rng: &mut ChaCha8Rng) -> BlockMask {
    if cfg.allow_both_dropped {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        return BlockMask {
            temporal: a >= cfg.p_drop_temporal,
            cross_view: b >= cfg.p_drop_crossview,
        };
    }
    let u: f64 = rng.random();
    BlockMask {
        temporal: u >= cfg.p_drop_temporal,
        cross_view: !(u >= cfg.p_drop_temporal && u < cfg.p_drop_temporal + cfg.p_drop_crossview),
    }
}

/// Conditioning signal for one clip window.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub text_tokens: Vec<u32>,
    /// `[T, V, 2, h, w]` box and lane rasters pooled to latent resolution.
    pub control: Tensor,
    /// `true` for frames given as clean references.
    pub reference: Vec<bool>,
    pub view_valid: Vec<bool>,
}

impl ConditionBundle {
    /// Conditions of `frames` of `clip` at latent downsampling `f`.
    pub fn from_clip(clip: &MultiViewClip, frames: &[usize], f: usize) -> Result<Self> {
        let (h, w) = (clip.height, clip.width);
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("{h}×{w} clip is not divisible by {f}")));
        }
        let mut data = Vec::with_capacity(frames.len() * clip.n_views * 2 * h * w);
        for &t in frames {
            for v in 0..clip.n_views {
                data.extend_from_slice(clip.box_raster(t, v));
                data.extend_from_slice(clip.lane_raster(t, v));
            }
        }
        let n = frames.len() * clip.n_views;
        let r = Tensor::from_vec(data, (n, 2, h, w), &Device::Cpu)?.avg_pool2d(f)?;
        Ok(Self {
            text_tokens: clip.conditions.text_tokens.clone(),
            control: r.reshape(vec![frames.len(), clip.n_views, 2, h / f, w / f])?,
            reference: vec![false; frames.len()],
            view_valid: clip.view_valid.clone(),
        })
    }

    /// Null text and empty rasters; the reference mask and views are kept.
    pub fn unconditional(&self) -> Result<Self> {
        Ok(Self {
            text_tokens: vec![vocab::NULL],
            control: self.control.zeros_like()?,
            reference: self.reference.clone(),
            view_valid: self.view_valid.clone(),
        })
    }

    /// Same conditions with the first `k` frames marked as references.
    pub fn with_references(&self, k: usize) -> Self {
        let mut c = self.clone();
        c.reference = (0..self.reference.len()).map(|i| i < k).collect();
        c
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            text_tokens: self.text_tokens.clone(),
            control: self.control.narrow(0, start, len)?,
            reference: self.reference[start..start + len].to_vec(),
            view_valid: self.view_valid.clone(),
        })
    }
}

/// One rectified-flow training tuple.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub zt: Tensor,
    pub target: Tensor,
}

/// Draws a flow time in `(0, 1)`.
pub fn draw_time(dist: TimeDistribution, rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let t = match dist {
            TimeDistribution::Uniform => rng.random::<f64>(),
            TimeDistribution::LogitNormal => {
                let n: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-n).exp())
            }
        };
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// `z_t = (1 − t)·z₀ + t·ε` with seeded `ε` and target `z₀ − ε`.
pub fn make_flow_sample(z0: &Tensor, dist: TimeDistribution, rng: &mut ChaCha8Rng) -> Result<FlowSample> {
    let t = draw_time(dist, rng);
    let eps = crate::nn::randn(z0.shape().clone(), rng)?.to_dtype(z0.dtype())?;
    flow_sample_at(z0, &eps, t)
}

pub fn flow_sample_at(z0: &Tensor, eps: &Tensor, t: f64) -> Result<FlowSample> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise and latent shapes differ"));
    }
    let zt = ((z0 * (1.0 - t))? + (eps * t)?)?;
    Ok(FlowSample {
        z0: z0.clone(),
        eps: eps.clone(),
        t,
        zt,
        target: (z0 - eps)?,
    })
}

/// Frame-view weights `[T, V, 1, 1, 1]`: one for predicted frames of valid views.
fn loss_weights(reference: &[bool], view_valid: &[bool]) -> (Vec<u8>, usize) {
    let mut m = Vec::with_capacity(reference.len() * view_valid.len());
    for &r in reference {
        for &v in view_valid {
            m.push((!r && v) as u8);
        }
    }
    let n = m.iter().filter(|&&x| x == 1).count();
    (m, n)
}

/// Mean squared error against the target over non-reference frames of valid views.
pub fn flow_loss(pred: &Tensor, sample: &FlowSample, reference: &[bool], view_valid: &[bool]) -> Result<Tensor> {
    let (t, v, c, h, w) = pred.dims5()?;
    if pred.dims() != sample.target.dims() || reference.len() != t || view_valid.len() != v {
        return Err(Error::shape("prediction, target and masks disagree"));
    }
    let (mask, n) = loss_weights(reference, view_valid);
    let sq = (pred - &sample.target)?.sqr()?;
    if n == 0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    let mask = Tensor::from_vec(mask, vec![t, v, 1, 1, 1], pred.device())?.broadcast_as(sq.shape())?;
    let kept = mask.where_cond(&sq, &sq.zeros_like()?)?;
    Ok((kept.sum_all()? / (n * c * h * w) as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stormvae::scalar;
    use rand::SeedableRng;

    fn z(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::randn(vec![shape.0, shape.1, shape.2, shape.3, shape.4], &mut rng).unwrap()
    }

    #[test]
    fn flow_sample_invariants() {
        let z0 = z((2, 2, 3, 2, 2), 1);
        let s = make_flow_sample(&z0, TimeDistribution::Uniform, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(s.t > 0.0 && s.t < 1.0);
        let expect = ((&s.z0 * (1.0 - s.t)).unwrap() + (&s.eps * s.t).unwrap()).unwrap();
        let a: Vec<f32> = s.zt.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = expect.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let near0 = flow_sample_at(&z0, &s.eps, 1e-9).unwrap();
        let d = scalar(&(near0.zt - &z0).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-6);
        let near1 = flow_sample_at(&z0, &s.eps, 1.0 - 1e-9).unwrap();
        let d = scalar(&(near1.zt - &s.eps).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-6);
        let sum = scalar(&((&s.target + &s.eps).unwrap() - &z0).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(sum < 1e-6);
    }

    #[test]
    fn flow_loss_cases() {
        let z0 = z((3, 2, 2, 2, 2), 2);
        let s = make_flow_sample(&z0, TimeDistribution::Uniform, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let none = [false; 3];
        let views = [true; 2];
        assert_eq!(scalar(&flow_loss(&s.target, &s, &none, &views).unwrap()).unwrap(), 0.0);
        let off = (&s.target + 0.3).unwrap();
        let l = scalar(&flow_loss(&off, &s, &none, &views).unwrap()).unwrap();
        assert!((l - 0.09).abs() < 1e-6);
        assert_eq!(scalar(&flow_loss(&off, &s, &[true; 3], &views).unwrap()).unwrap(), 0.0);
        let l = scalar(&flow_loss(&off, &s, &[true, false, false], &[true, false]).unwrap()).unwrap();
        assert!((l - 0.09).abs() < 1e-6);
    }

    #[test]
    fn dropout_extremes_and_exclusivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let off = DiffusionConfig {
            p_drop_temporal: 0.0,
            p_drop_crossview: 0.0,
            ..Default::default()
        };
        assert!((0..100).all(|_| block_dropout(&off, &mut rng) == BlockMask::ALL));
        let always = DiffusionConfig {
            p_drop_temporal: 1.0,
            p_drop_crossview: 0.0,
            ..Default::default()
        };
        assert!((0..100).all(|_| !block_dropout(&always, &mut rng).temporal));
        let cfg = DiffusionConfig::default();
        assert!((0..1000).all(|_| block_dropout(&cfg, &mut rng) != BlockMask::SPATIAL_ONLY));
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let cfg = DiffusionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let (mut dt, mut dv) = (0, 0);
        for _ in 0..n {
            let m = block_dropout(&cfg, &mut rng);
            dt += !m.temporal as usize;
            dv += !m.cross_view as usize;
        }
        assert!((dt as f64 / n as f64 - 0.1).abs() < 0.01);
        assert!((dv as f64 / n as f64 - 0.1).abs() < 0.01);
    }

    #[test]
    fn logit_normal_times_are_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).map(|_| draw_time(TimeDistribution::LogitNormal, &mut rng)).all(|t| t > 0.0 && t < 1.0));
    }
}
