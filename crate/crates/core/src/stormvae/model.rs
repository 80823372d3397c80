//! The full model, target rendering and per-sample losses.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_storm, loss_vae, scalar, total_loss, StormTerms, VaeTerms};
use super::{reparameterize_with, select_context, Encoder, GsDecoder, GsDecoderOutput, ImageDecoder, PosteriorStats, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{randn, ParamStore};
use crate::splatcore::{SplatConfig, SplatRenderOp};
use crate::synthworld::{CameraModel, MultiViewClip};

/// One rendered target view.
#[derive(Debug, Clone)]
pub struct TargetRender {
    /// `[H, W, 3]` after sky compositing and exposure.
    pub rgb: Tensor,
    /// `[H, W]` alpha-normalized ray distance.
    pub depth: Tensor,
    /// `[H, W]`.
    pub alpha: Tensor,
}

/// Target camera, time and the view index selecting its exposure.
#[derive(Debug, Clone, Copy)]
pub struct Target {
    pub camera: CameraModel,
    pub time: f64,
    pub view: usize,
}

/// Renders the union of all valid context grids at each target.
pub fn render_targets(out: &GsDecoderOutput, targets: &[Target], cfg: &SplatConfig) -> Result<Vec<TargetRender>> {
    let (tc, v, h, w, ch) = out.grids.dims5()?;
    let mut index = Vec::new();
    let mut sources = Vec::new();
    for t in 0..tc {
        for (vi, &ok) in out.view_valid.iter().enumerate() {
            if ok {
                index.push((t * v + vi) as u32);
                sources.push((out.cameras[t * v + vi], out.times[t]));
            }
        }
    }
    let dev = out.grids.device();
    let idx = Tensor::from_vec(index.clone(), index.len(), dev)?;
    let raw = out.grids.reshape((tc * v, h, w, ch))?.index_select(&idx, 0)?;
    let sky = out.sky.reshape((1, 1, 3))?;
    let mut renders = Vec::with_capacity(targets.len());
    for tg in targets {
        if tg.view >= v {
            return Err(Error::shape(format!("target view {} out of range", tg.view)));
        }
        let op = SplatRenderOp {
            sources: sources.clone(),
            target: tg.camera,
            target_time: tg.time,
            cfg: *cfg,
        };
        let r = op.forward(&raw)?;
        let rgb = r.narrow(2, 0, 3)?;
        let depth = r.narrow(2, 3, 1)?.squeeze(2)?;
        let alpha = r.narrow(2, 4, 1)?;
        let composed = (rgb + (1.0 - &alpha)?.broadcast_mul(&sky)?)?.clamp(0.0, 1.0)?;
        let e = out.exposure.get(tg.view)?;
        let gain = e.narrow(0, 0, 1)?.reshape((1, 1, 1))?;
        let bias = e.narrow(0, 1, 1)?.reshape((1, 1, 1))?;
        let rgb = composed.broadcast_mul(&gain)?.broadcast_add(&bias)?.clamp(0.0, 1.0)?;
        renders.push(TargetRender {
            rgb,
            depth,
            alpha: alpha.squeeze(2)?,
        });
    }
    Ok(renders)
}

/// Everything one loss evaluation needs, already gathered from a clip.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `[Tc·V, 3, H, W]`.
    pub context: Tensor,
    pub context_times: Vec<f64>,
    /// Indexed `t * V + v`.
    pub context_cameras: Vec<CameraModel>,
    pub view_valid: Vec<bool>,
    pub targets: Vec<Target>,
    /// `[K, H, W, 3]`.
    pub target_rgb: Tensor,
    /// `K·H·W`, `+∞` where no depth is available.
    pub target_depth: Vec<f32>,
}

/// `[frames·V, 3, H, W]` images of the given frames.
pub fn clip_frames(clip: &MultiViewClip, frames: &[usize], dtype: DType) -> Result<Tensor> {
    let (h, w) = (clip.height, clip.width);
    let mut data = Vec::with_capacity(frames.len() * clip.n_views * h * w * 3);
    for &t in frames {
        for v in 0..clip.n_views {
            data.extend_from_slice(clip.image(t, v));
        }
    }
    let x = Tensor::from_vec(data, (frames.len() * clip.n_views, h, w, 3), &Device::Cpu)?;
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

impl TrainingSample {
    pub fn from_clip(clip: &MultiViewClip, context: &[usize], targets: &[usize], dtype: DType) -> Result<Self> {
        let v = clip.n_views;
        let (h, w) = (clip.height, clip.width);
        let mut tg = Vec::new();
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        for &t in targets {
            for vi in (0..v).filter(|&vi| clip.view_valid[vi]) {
                tg.push(Target {
                    camera: *clip.camera(t, vi),
                    time: clip.timestamps[t],
                    view: vi,
                });
                rgb.extend_from_slice(clip.image(t, vi));
                depth.extend_from_slice(clip.depth_map(t, vi));
            }
        }
        let k = tg.len();
        Ok(Self {
            context: clip_frames(clip, context, dtype)?,
            context_times: context.iter().map(|&t| clip.timestamps[t]).collect(),
            context_cameras: context.iter().flat_map(|&t| (0..v).map(move |vi| *clip.camera(t, vi))).collect(),
            view_valid: clip.view_valid.clone(),
            targets: tg,
            target_rgb: Tensor::from_vec(rgb, (k, h, w, 3), &Device::Cpu)?.to_dtype(dtype)?,
            target_depth: depth,
        })
    }
}

/// Loss terms of one step; `storm` is `None` when the rendering branch was skipped.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub vae: VaeTerms,
    pub storm: Option<StormTerms>,
}

impl StepLosses {
    /// `(name, value)` pairs for logging.
    pub fn values(&self) -> Result<Vec<(&'static str, f64)>> {
        let mut v = vec![
            ("total", scalar(&self.total)?),
            ("vae", scalar(&self.vae.total)?),
            ("mse", scalar(&self.vae.mse)?),
            ("perceptual", scalar(&self.vae.perceptual)?),
            ("kl", scalar(&self.vae.kl)?),
        ];
        if let Some(s) = &self.storm {
            v.push(("storm", scalar(&s.total)?));
            v.push(("render_rgb", scalar(&s.rgb)?));
            v.push(("render_depth", scalar(&s.depth)?));
        }
        Ok(v)
    }
}

/// Encoder, image decoder and Gaussian decoder sharing one parameter store.
#[derive(Clone)]
pub struct StormVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: ImageDecoder,
    pub gs: GsDecoder,
}

impl StormVae {
    pub fn new(cfg: &VaeConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::with_dtype(seed, dtype);
        let vb = store.vb();
        Ok(Self {
            encoder: Encoder::new(cfg, vb.pp("encoder"))?,
            decoder: ImageDecoder::new(cfg, vb.pp("decoder"))?,
            gs: GsDecoder::new(cfg, vb.pp("gs"))?,
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Parameters whose names start with `prefix` (`encoder`, `decoder`, `gs`).
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        let p = format!("{prefix}.");
        self.store.named_vars().into_iter().filter(|(n, _)| n.starts_with(&p)).collect()
    }

    /// `[N, 3, H, W]` images to posterior stats.
    pub fn encode(&self, images: &Tensor) -> Result<PosteriorStats> {
        self.encoder.forward(images)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// Detached posterior means of every frame-view, `[T, V, C, h, w]`.
    pub fn encode_clip_means(&self, clip: &MultiViewClip) -> Result<Tensor> {
        let frames: Vec<usize> = (0..clip.n_frames).collect();
        let mut parts = Vec::new();
        for chunk in frames.chunks(4) {
            let x = clip_frames(clip, chunk, self.dtype())?;
            parts.push(self.encode(&x)?.mean.detach());
        }
        let m = Tensor::cat(&parts, 0)?;
        let (_, c, h, w) = m.dims4()?;
        Ok(m.reshape((clip.n_frames, clip.n_views, c, h, w))?)
    }

    /// Gaussian decoding of `[Tc, V, C, h, w]` latents.
    pub fn gs_decode(&self, latents: &Tensor, times: &[f64], cameras: &[CameraModel], view_valid: &[bool]) -> Result<GsDecoderOutput> {
        self.gs.forward(latents, times, cameras, view_valid)
    }

    /// Losses for one prepared sample with fixed reparameterization noise.
    pub fn sample_losses(&self, s: &TrainingSample, eta: &Tensor, use_storm: bool) -> Result<StepLosses> {
        let w = &self.cfg.weights;
        let stats = self.encode(&s.context)?;
        let z = reparameterize_with(&stats, eta)?;
        let x_hat = self.decode(&z)?;
        let vae = loss_vae(&s.context, &x_hat, &stats, w)?;
        if !use_storm || w.lambda == 0.0 || s.targets.is_empty() {
            return Ok(StepLosses {
                total: vae.total.clone(),
                vae,
                storm: None,
            });
        }
        let v = s.view_valid.len();
        let (n, c, h, wd) = z.dims4()?;
        let latents = z.reshape((n / v, v, c, h, wd))?;
        let out = self.gs_decode(&latents, &s.context_times, &s.context_cameras, &s.view_valid)?;
        let renders = render_targets(&out, &s.targets, &self.cfg.splat)?;
        let rgb = Tensor::stack(&renders.iter().map(|r| r.rgb.clone()).collect::<Vec<_>>(), 0)?;
        let depth = Tensor::stack(&renders.iter().map(|r| r.depth.clone()).collect::<Vec<_>>(), 0)?;
        let storm = loss_storm(&rgb, &s.target_rgb, &depth, &s.target_depth, w.depth)?;
        Ok(StepLosses {
            total: total_loss(&vae.total, &storm.total, w.lambda)?,
            vae,
            storm: Some(storm),
        })
    }

    /// Reparameterization noise shaped like the posterior of `s.context`.
    pub fn sample_noise(&self, s: &TrainingSample, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (n, _, h, w) = s.context.dims4()?;
        let f = self.cfg.downsample;
        Ok(randn((n, self.cfg.latent_channels, h / f, w / f), rng)?.to_dtype(self.dtype())?)
    }

    /// Draws context/targets and noise, then evaluates the losses. Single-view
    /// clips skip the rendering branch.
    pub fn step_losses(&self, clip: &MultiViewClip, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let (ctx, tgt) = select_context(clip.n_frames, self.cfg.n_targets, rng)?;
        let s = TrainingSample::from_clip(clip, &ctx, &tgt, self.dtype())?;
        let eta = self.sample_noise(&s, rng)?;
        self.sample_losses(&s, &eta, clip.n_views > 1)
    }
}
