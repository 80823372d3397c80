//! Transformer that turns context latents into pixel-aligned Gaussian grids.
//!
//! Each context latent is cut into `p×p` patches. A token carries a learned
//! position, a time embedding, a view embedding and an embedding of its
//! camera pose. One sky token and one exposure token per view are appended.
//! Invalid views are zeroed before embedding and removed from attention as
//! keys, so their content never reaches the output. Each grid token is
//! unpatchified into `(p·f)²` pixels of 15 raw channels.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};

use super::VaeConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, linear_std, linear_zero, sinusoidal, Attention, LayerNorm, Mlp};
use crate::splatcore::{ScaleMode, GRID_CHANNELS};
use crate::synthworld::CameraModel;

/// Key bias applied to tokens of invalid views.
const MASK_BIAS: f64 = -1e9;
/// Longest period of the time embedding, seconds.
const TIME_PERIOD: f64 = 100.0;

#[derive(Debug, Clone)]
struct Block {
    n1: LayerNorm,
    attn: Attention,
    n2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            n1: LayerNorm::new(dim, vb.pp("n1"))?,
            attn: Attention::new(dim, heads, false, vb.pp("attn"))?,
            n2: LayerNorm::new(dim, vb.pp("n2"))?,
            mlp: Mlp::new(dim, 4 * dim, false, vb.pp("mlp"))?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.n1.forward(x)?, Some(bias))?)?;
        &x + self.mlp.forward(&self.n2.forward(&x)?)?
    }
}

/// Decoded Gaussian grids plus sky and exposure for one set of context frames.
#[derive(Debug, Clone)]
pub struct GsDecoderOutput {
    /// Raw channels `[Tc, V, H, W, 15]`; zero for invalid views.
    pub grids: Tensor,
    /// Sky color `[3]` in `(0, 1)`.
    pub sky: Tensor,
    /// Per-view `(gain, bias)`, `[V, 2]`.
    pub exposure: Tensor,
    pub times: Vec<f64>,
    /// Indexed `t * V + v`.
    pub cameras: Vec<CameraModel>,
    pub view_valid: Vec<bool>,
}

impl GsDecoderOutput {
    pub fn n_views(&self) -> usize {
        self.view_valid.len()
    }
}

#[derive(Debug, Clone)]
pub struct GsDecoder {
    patch_embed: Linear,
    pos: Tensor,
    time_embed: Linear,
    view_embed: Tensor,
    pose_embed: Linear,
    sky_token: Tensor,
    exposure_tokens: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    sky_head: Linear,
    exposure_head: Linear,
    offset: Vec<f64>,
    cfg: VaeConfig,
}

fn pose_features(cam: &CameraModel) -> [f64; 12] {
    let r = cam.rotation_matrix();
    let mut f = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            f[i * 3 + j] = r[(i, j)];
        }
        f[9 + i] = cam.translation[i];
    }
    f
}

fn head_offset(cfg: &VaeConfig) -> [f64; GRID_CHANNELS] {
    let mut o = [0.0; GRID_CHANNELS];
    o[0] = cfg.depth_bias;
    o[1] = 1.0;
    match cfg.splat.scale_mode {
        ScaleMode::Anisotropic => {
            o[5..8].fill(cfg.scale_bias);
            o[8] = cfg.opacity_bias;
        }
        ScaleMode::Isotropic => {
            o[5] = cfg.scale_bias;
            o[6] = cfg.opacity_bias;
        }
    }
    o
}

/// `[..., S]` mask as a bool-valued u8 tensor broadcast to `shape`.
fn view_mask(valid: &[bool], shape: &[usize], axis: usize, dev: &Device) -> Result<Tensor> {
    let m: Vec<u8> = valid.iter().map(|&v| v as u8).collect();
    let mut dims = vec![1; shape.len()];
    dims[axis] = valid.len();
    Ok(Tensor::from_vec(m, dims, dev)?.broadcast_as(shape)?.contiguous()?)
}

impl GsDecoder {
    pub fn new(cfg: &VaeConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.gs_width;
        let p = cfg.patch;
        let side = cfg.max_latent_side.div_ceil(p);
        let pp = p * cfg.downsample;
        let std = 0.02;
        let blocks = (0..cfg.gs_layers)
            .map(|i| Block::new(d, cfg.gs_heads, vb.pp(format!("block{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let offset = head_offset(cfg);
        Ok(Self {
            patch_embed: linear(cfg.latent_channels * p * p, d, vb.pp("patch_embed"))?,
            pos: vb.get_with_hints((side, side, d), "pos", candle_nn::Init::Randn { mean: 0.0, stdev: std })?,
            time_embed: linear(d, d, vb.pp("time_embed"))?,
            view_embed: vb.get_with_hints((cfg.max_views, d), "view_embed", candle_nn::Init::Randn { mean: 0.0, stdev: std })?,
            pose_embed: linear_std(12, d, std, vb.pp("pose_embed"))?,
            sky_token: vb.get_with_hints((1, d), "sky_token", candle_nn::Init::Randn { mean: 0.0, stdev: std })?,
            exposure_tokens: vb.get_with_hints((cfg.max_views, d), "exposure_tokens", candle_nn::Init::Randn { mean: 0.0, stdev: std })?,
            blocks,
            norm: LayerNorm::new(d, vb.pp("norm"))?,
            head: linear_std(d, pp * pp * GRID_CHANNELS, 1e-3, vb.pp("head"))?,
            sky_head: linear(d, 3, vb.pp("sky_head"))?,
            exposure_head: linear_zero(d, 2, vb.pp("exposure_head"))?,
            offset: (0..pp * pp).flat_map(|_| offset).collect(),
            cfg: cfg.clone(),
        })
    }

    /// `latents` is `[Tc, V, C, h, w]`; `cameras` is indexed `t * V + v`.
    pub fn forward(&self, latents: &Tensor, times: &[f64], cameras: &[CameraModel], view_valid: &[bool]) -> Result<GsDecoderOutput> {
        let (tc, v, c, h, w) = latents.dims5()?;
        let p = self.cfg.patch;
        let f = self.cfg.downsample;
        let d = self.cfg.gs_width;
        let dev = latents.device();
        let dt = latents.dtype();
        if times.len() != tc || cameras.len() != tc * v || view_valid.len() != v {
            return Err(Error::shape("context times, cameras and view mask must match the latent grid"));
        }
        if c != self.cfg.latent_channels || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!("latent {:?} incompatible with patch {p}", latents.dims())));
        }
        let (hp, wp) = (h / p, w / p);
        let side = self.pos.dim(0)?;
        if hp > side || wp > side {
            return Err(Error::config(format!("latent side exceeds the positional table ({side} patches)")));
        }
        if v > self.cfg.max_views {
            return Err(Error::config(format!("{v} views exceed max_views {}", self.cfg.max_views)));
        }
        if !view_valid.iter().any(|&b| b) {
            return Err(Error::config("gaussian decoder needs at least one valid view"));
        }

        let mask5 = view_mask(view_valid, &[tc, v, c, h, w], 1, dev)?;
        let z = mask5.where_cond(latents, &latents.zeros_like()?)?;

        let n = tc * v;
        let l = hp * wp;
        let patches = z
            .reshape(vec![tc, v, c, hp, p, wp, p])?
            .permute(vec![0, 1, 3, 5, 2, 4, 6])?
            .reshape((n, l, c * p * p))?;
        let mut x = self.patch_embed.forward(&patches)?;
        let pos = self.pos.narrow(0, 0, hp)?.narrow(1, 0, wp)?.reshape((1, l, d))?;
        x = x.broadcast_add(&pos)?;

        let temb = self.time_embed.forward(&sinusoidal(times, d, TIME_PERIOD)?.to_dtype(dt)?)?;
        let vemb = self.view_embed.narrow(0, 0, v)?;
        let poses: Vec<f64> = cameras.iter().flat_map(pose_features).collect();
        let pemb = self
            .pose_embed
            .forward(&Tensor::from_vec(poses, (n, 12), dev)?.to_dtype(dt)?)?
            .reshape((tc, v, d))?;
        let frame = pemb
            .broadcast_add(&temb.unsqueeze(1)?)?
            .broadcast_add(&vemb.unsqueeze(0)?)?
            .reshape((n, 1, d))?;
        x = x.broadcast_add(&frame)?.reshape((1, n * l, d))?;

        let exp_tokens = (self.exposure_tokens.narrow(0, 0, v)? + &vemb)?;
        x = Tensor::cat(&[&x, &self.sky_token.unsqueeze(0)?, &exp_tokens.unsqueeze(0)?], 1)?;

        let mut bias = Vec::with_capacity(n * l + 1 + v);
        for _ in 0..tc {
            for &ok in view_valid {
                bias.extend(std::iter::repeat_n(if ok { 0.0 } else { MASK_BIAS }, l));
            }
        }
        bias.extend(std::iter::repeat_n(0.0, 1 + v));
        let s = bias.len();
        let bias = Tensor::from_vec(bias, (1, 1, 1, s), dev)?.to_dtype(dt)?;

        for b in &self.blocks {
            x = b.forward(&x, &bias)?;
        }
        let x = self.norm.forward(&x)?.squeeze(0)?;

        let pf = p * f;
        let tokens = x.narrow(0, 0, n * l)?;
        let offset = Tensor::from_slice(&self.offset, self.offset.len(), dev)?.to_dtype(dt)?;
        let raw = self.head.forward(&tokens)?.broadcast_add(&offset)?;
        let grids = raw
            .reshape(vec![tc, v, hp, wp, pf, pf, GRID_CHANNELS])?
            .permute(vec![0, 1, 2, 4, 3, 5, 6])?
            .reshape((tc, v, hp * pf, wp * pf, GRID_CHANNELS))?;
        let mask_g = view_mask(view_valid, grids.dims(), 1, dev)?;
        let grids = mask_g.where_cond(&grids, &grids.zeros_like()?)?;

        let sky = candle_nn::ops::sigmoid(&self.sky_head.forward(&x.narrow(0, n * l, 1)?)?)?.squeeze(0)?;
        let e = self.exposure_head.forward(&x.narrow(0, n * l + 1, v)?)?;
        let exposure = Tensor::cat(&[&e.narrow(D::Minus1, 0, 1)?.exp()?, &e.narrow(D::Minus1, 1, 1)?], 1)?;

        Ok(GsDecoderOutput {
            grids,
            sky,
            exposure,
            times: times.to_vec(),
            cameras: cameras.to_vec(),
            view_valid: view_valid.to_vec(),
        })
    }
}

/// Number of transformer tokens for a context set, excluding auxiliary tokens.
pub fn grid_tokens(tc: usize, v: usize, h: usize, w: usize, patch: usize) -> usize {
    tc * v * (h / patch) * (w / patch)
}
