//! Euler sampling with reference-frame inpainting, and autoregressive rollout.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::VelocityModel;
use super::{BlockMask, ConditionBundle};
use crate::error::{Error, Result};

/// Largest flow time handed to the model; sampling starts at exactly 1.
pub const T_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub guidance: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            guidance: 1.0,
        }
    }
}

/// The starting noise of [`sample`] for a given seed.
pub fn initial_noise(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(crate::nn::randn(shape, &mut rng)?.to_dtype(dtype)?)
}

/// Predicts `z₀ − ε` for a known pair, whatever the input.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub target: Tensor,
}

impl OraclePredictor {
    pub fn new(z0: &Tensor, eps: &Tensor) -> Result<Self> {
        Ok(Self { target: (z0 - eps)? })
    }
}

impl VelocityModel for OraclePredictor {
    fn predict(&self, _z: &Tensor, _t: f64, _cond: &ConditionBundle, _mask: BlockMask) -> Result<Tensor> {
        Ok(self.target.clone())
    }
}

/// Integrates from noise at `t = 1` to `t = 0` with `z ← z + Δ·prediction`.
///
/// `refs` holds the first `k` clean frames `[k, V, C, h, w]`; after every
/// step those frames are reset to `(1 − t)·ref + t·ε_ref`, where `ε_ref` is
/// their starting noise, and to `ref` itself at `t = 0`.
pub fn sample(
    model: &dyn VelocityModel,
    cond: &ConditionBundle,
    refs: Option<&Tensor>,
    shape: &[usize],
    dtype: DType,
    opts: SampleOptions,
) -> Result<Tensor> {
    if opts.steps == 0 {
        return Err(Error::config("sampling needs at least one step"));
    }
    if shape.len() != 5 || cond.reference.len() != shape[0] {
        return Err(Error::shape("sample shape must be [T, V, C, h, w] matching the conditions"));
    }
    let nt = shape[0];
    let k = match refs {
        Some(r) => {
            if r.dims()[1..] != shape[1..] || r.dim(0)? > nt {
                return Err(Error::shape("reference frames do not match the sample shape"));
            }
            r.dim(0)?
        }
        None => 0,
    };
    let cond = cond.with_references(k);
    let uncond = if opts.guidance != 1.0 { Some(cond.unconditional()?) } else { None };
    let mut z = initial_noise(shape, opts.seed, dtype)?;
    let refs = refs.map(|r| r.to_dtype(dtype)).transpose()?;
    let eps_ref = z.narrow(0, 0, k)?;
    let n = opts.steps;
    let dt = 1.0 / n as f64;
    for i in 0..n {
        let t = ((n - i) as f64 / n as f64).min(T_MAX);
        let mut pred = model.predict(&z, t, &cond, BlockMask::ALL)?.detach();
        if let Some(u) = &uncond {
            let pu = model.predict(&z, t, u, BlockMask::ALL)?.detach();
            pred = (&pu + ((pred - &pu)? * opts.guidance)?)?;
        }
        z = (z + (pred * dt)?)?;
        if let Some(r) = &refs {
            if k > 0 {
                let t_next = (n - i - 1) as f64 / n as f64;
                let fixed = if t_next == 0.0 {
                    r.clone()
                } else {
                    ((r * (1.0 - t_next))? + (&eps_ref * t_next)?)?
                };
                z = if k == nt { fixed } else { Tensor::cat(&[&fixed, &z.narrow(0, k, nt - k)?], 0)? };
            }
        }
    }
    Ok(z)
}

/// Window start frames covering `total` frames with windows of `window`
/// frames that overlap by `k`.
pub fn plan_windows(total: usize, window: usize, k: usize) -> Result<Vec<usize>> {
    if window <= k {
        return Err(Error::config("window must be longer than the reference count"));
    }
    if total < window || (total - k) % (window - k) != 0 {
        return Err(Error::config(format!(
            "{total} frames cannot be covered by {window}-frame windows overlapping by {k}"
        )));
    }
    Ok((0..(total - k) / (window - k)).map(|i| i * (window - k)).collect())
}

/// Samples `total` frames window by window. The first window uses `refs`
/// (possibly none); later windows take the last `k` generated frames as
/// references. `cond` covers all `total` frames.
pub fn autoregress(
    model: &dyn VelocityModel,
    cond: &ConditionBundle,
    refs: Option<&Tensor>,
    frame_shape: [usize; 4],
    total: usize,
    window: usize,
    k: usize,
    dtype: DType,
    opts: SampleOptions,
) -> Result<Tensor> {
    let starts = plan_windows(total, window, k)?;
    if cond.reference.len() != total {
        return Err(Error::shape("conditions must cover every output frame"));
    }
    let [v, c, h, w] = frame_shape;
    let shape = [window, v, c, h, w];
    let mut out: Option<Tensor> = None;
    for (i, &s) in starts.iter().enumerate() {
        let cw = cond.window(s, window)?;
        let o = SampleOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..opts
        };
        out = Some(match out {
            None => sample(model, &cw, refs, &shape, dtype, o)?,
            Some(prev) => {
                let r = prev.narrow(0, s, k)?;
                let z = sample(model, &cw, Some(&r), &shape, dtype, o)?;
                Tensor::cat(&[&prev, &z.narrow(0, k, window - k)?], 0)?
            }
        });
    }
    out.ok_or_else(|| Error::config("no sampling windows"))
}
