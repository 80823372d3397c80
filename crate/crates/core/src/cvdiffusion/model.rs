//! The block-stack transformer.
//!
//! Every block is pre-norm attention plus feed-forward, modulated by
//! `shift, scale, 1 + gate` triples computed from the time and text
//! embedding. Modulation weights start at zero, so gates start at one.
//! Temporal and cross-view blocks start with zero output projections, so
//! before training they add exactly nothing to the residual stream.

use candle_core::{Device, Module, Tensor};
use candle_nn::{Embedding, Init, Linear, VarBuilder};

use super::reshape::{tokens, untokens, Layout};
use super::{BlockMask, ConditionBundle, DiffusionConfig, CONTROL_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{linear, linear_std, linear_zero, sinusoidal, Attention, LayerNorm, Mlp};

const MASK_BIAS: f64 = -1e9;

/// Anything that predicts the flow target `z₀ − ε` from `z_t`.
pub trait VelocityModel {
    fn predict(&self, z: &Tensor, t: f64, cond: &ConditionBundle, mask: BlockMask) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct AdaBlock {
    norm: LayerNorm,
    modulation: Linear,
    attn: Attention,
    mlp: Mlp,
    pos: Option<Tensor>,
}

impl AdaBlock {
    fn new(dim: usize, heads: usize, appended: bool, pos_len: Option<usize>, vb: VarBuilder) -> candle_core::Result<Self> {
        let pos = match pos_len {
            Some(n) => Some(vb.get_with_hints((n, dim), "pos", Init::Randn { mean: 0.0, stdev: 0.02 })?),
            None => None,
        };
        Ok(Self {
            norm: LayerNorm::plain(),
            modulation: linear_zero(dim, 6 * dim, vb.pp("modulation"))?,
            attn: Attention::new(dim, heads, appended, vb.pp("attn"))?,
            mlp: Mlp::new(dim, 4 * dim, appended, vb.pp("mlp"))?,
            pos,
        })
    }

    /// `x` is `[S, N, D]`, `c` is `[1, D]` (already passed through SiLU).
    fn forward(&self, x: &Tensor, c: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let n = x.dim(1)?;
        let m = self.modulation.forward(c)?.unsqueeze(0)?.chunk(6, 2)?;
        let mut h = self.norm.forward(x)?.broadcast_mul(&(&m[1] + 1.0)?)?.broadcast_add(&m[0])?;
        if let Some(p) = &self.pos {
            h = h.broadcast_add(&p.narrow(0, 0, n)?.unsqueeze(0)?)?;
        }
        let x = (x + self.attn.forward(&h, bias)?.broadcast_mul(&(&m[2] + 1.0)?)?)?;
        let h = self.norm.forward(&x)?.broadcast_mul(&(&m[4] + 1.0)?)?.broadcast_add(&m[3])?;
        &x + self.mlp.forward(&h)?.broadcast_mul(&(&m[5] + 1.0)?)?
    }
}

#[derive(Debug, Clone)]
struct Unit {
    spatial: AdaBlock,
    temporal: AdaBlock,
    cross_view: AdaBlock,
}

/// Spatial/temporal/cross-view diffusion transformer.
#[derive(Debug, Clone)]
pub struct CvDit {
    patch_embed: Linear,
    pos: Tensor,
    time1: Linear,
    time2: Linear,
    text_embed: Embedding,
    text_proj: Linear,
    units: Vec<Unit>,
    final_norm: LayerNorm,
    final_mod: Linear,
    final_linear: Linear,
    cfg: DiffusionConfig,
}

impl CvDit {
    pub fn new(cfg: &DiffusionConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let p = cfg.patch;
        let side = cfg.max_latent_side.div_ceil(p);
        let units = (0..cfg.units)
            .map(|i| {
                let vu = vb.pp(format!("unit{i}"));
                Ok(Unit {
                    spatial: AdaBlock::new(d, cfg.heads, false, None, vu.pp("spatial"))?,
                    temporal: AdaBlock::new(d, cfg.heads, true, Some(cfg.max_frames), vu.pp("temporal"))?,
                    cross_view: AdaBlock::new(d, cfg.heads, true, None, vu.pp("cross_view"))?,
                })
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: linear((cfg.latent_channels + CONTROL_CHANNELS) * p * p, d, vb.pp("patch_embed"))?,
            pos: vb.get_with_hints((side, side, d), "pos", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            time1: linear(d, d, vb.pp("time1"))?,
            time2: linear(d, d, vb.pp("time2"))?,
            text_embed: candle_nn::embedding(cfg.vocab_size, d, vb.pp("text_embed"))?,
            text_proj: linear(d, d, vb.pp("text_proj"))?,
            units,
            final_norm: LayerNorm::plain(),
            final_mod: linear_zero(d, 2 * d, vb.pp("final_mod"))?,
            final_linear: linear_std(d, p * p * cfg.latent_channels, 0.02, vb.pp("final_linear"))?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    /// Time plus pooled text embedding, `[1, D]`.
    fn conditioning(&self, t: f64, text: &[u32], dev: &Device, dt: candle_core::DType) -> Result<Tensor> {
        let d = self.cfg.width;
        let te = sinusoidal(&[t * 1000.0], d, 10_000.0)?.to_dtype(dt)?;
        let te = self.time2.forward(&candle_nn::ops::silu(&self.time1.forward(&te)?)?)?;
        let ids: Vec<u32> = if text.is_empty() { vec![0] } else { text.to_vec() };
        if ids.iter().any(|&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::config("text token outside the vocabulary"));
        }
        let n = ids.len();
        let emb = self.text_embed.forward(&Tensor::from_vec(ids, n, dev)?)?.mean_keepdim(0)?;
        Ok((te + self.text_proj.forward(&emb)?)?)
    }

    pub fn forward(&self, z: &Tensor, t: f64, cond: &ConditionBundle, mask: BlockMask) -> Result<Tensor> {
        let (nt, nv, c, h, w) = z.dims5()?;
        let p = self.cfg.patch;
        let d = self.cfg.width;
        let dev = z.device().clone();
        let dt = z.dtype();
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(format!("flow time {t} outside (0, 1)")));
        }
        if c != self.cfg.latent_channels || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!("latent {:?} incompatible with the model", z.dims())));
        }
        if cond.control.dims() != [nt, nv, 2, h, w] || cond.reference.len() != nt || cond.view_valid.len() != nv {
            return Err(Error::shape("condition bundle does not match the latent grid"));
        }
        if nt > self.cfg.max_frames {
            return Err(Error::config(format!("{nt} frames exceed max_frames {}", self.cfg.max_frames)));
        }
        let (hp, wp) = (h / p, w / p);
        if hp > self.pos.dim(0)? || wp > self.pos.dim(1)? {
            return Err(Error::config("latent side exceeds the positional table"));
        }

        let valid: Vec<u8> = cond.view_valid.iter().map(|&b| b as u8).collect();
        let vmask = Tensor::from_vec(valid, vec![1, nv, 1, 1, 1], &dev)?;
        let refs: Vec<f32> = cond
            .reference
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r as u8 as f32, nv * h * w))
            .collect();
        let refs = Tensor::from_vec(refs, vec![nt, nv, 1, h, w], &dev)?.to_dtype(dt)?;
        let input = Tensor::cat(&[z, &cond.control.to_dtype(dt)?, &refs], 2)?;
        let input = vmask.broadcast_as(input.shape())?.where_cond(&input, &input.zeros_like()?)?;

        let c3 = c + CONTROL_CHANNELS;
        let l = hp * wp;
        let patches = input
            .reshape(vec![nt, nv, c3, hp, p, wp, p])?
            .permute(vec![0, 1, 3, 5, 2, 4, 6])?
            .reshape((nt * nv * l, c3 * p * p))?;
        let x = self.patch_embed.forward(&patches)?.reshape((nt * nv, l, d))?;
        let pos = self.pos.narrow(0, 0, hp)?.narrow(1, 0, wp)?.reshape((1, l, d))?;
        let x = x.broadcast_add(&pos)?;
        let dims = (nt, nv, d, hp, wp);
        let mut grid = untokens(Layout::Spatial, &x, dims)?;

        let cvec = candle_nn::ops::silu(&self.conditioning(t, &cond.text_tokens, &dev, dt)?)?;
        let n_valid = cond.view_valid.iter().filter(|&&b| b).count();
        let run_cross = mask.cross_view && nv > 1 && n_valid > 1;
        let cross_bias = if run_cross {
            let b: Vec<f64> = cond.view_valid.iter().map(|&v| if v { 0.0 } else { MASK_BIAS }).collect();
            Some(Tensor::from_vec(b, (1, 1, 1, nv), &dev)?.to_dtype(dt)?)
        } else {
            None
        };

        for u in &self.units {
            let x = u.spatial.forward(&tokens(Layout::Spatial, &grid)?, &cvec, None)?;
            grid = untokens(Layout::Spatial, &x, dims)?;
            if mask.temporal {
                let x = u.temporal.forward(&tokens(Layout::Temporal, &grid)?, &cvec, None)?;
                grid = untokens(Layout::Temporal, &x, dims)?;
            }
            if run_cross {
                let x = u.cross_view.forward(&tokens(Layout::CrossView, &grid)?, &cvec, cross_bias.as_ref())?;
                grid = untokens(Layout::CrossView, &x, dims)?;
            }
        }

        let x = tokens(Layout::Spatial, &grid)?;
        let m = self.final_mod.forward(&cvec)?.unsqueeze(0)?.chunk(2, 2)?;
        let x = self.final_norm.forward(&x)?.broadcast_mul(&(&m[1] + 1.0)?)?.broadcast_add(&m[0])?;
        let out = self
            .final_linear
            .forward(&x)?
            .reshape(vec![nt, nv, hp, wp, c, p, p])?
            .permute(vec![0, 1, 4, 2, 5, 3, 6])?
            .reshape(vec![nt, nv, c, h, w])?;
        Ok(vmask.broadcast_as(out.shape())?.where_cond(&out, &out.zeros_like()?)?)
    }
}

impl VelocityModel for CvDit {
    fn predict(&self, z: &Tensor, t: f64, cond: &ConditionBundle, mask: BlockMask) -> Result<Tensor> {
        self.forward(z, t, cond, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::stormvae::scalar;

    fn tiny() -> DiffusionConfig {
        DiffusionConfig {
            units: 2,
            width: 24,
            heads: 3,
            latent_channels: 4,
            ..Default::default()
        }
    }

    fn bundle(t: usize, v: usize, h: usize) -> ConditionBundle {
        ConditionBundle {
            text_tokens: vec![1, 3, 5],
            control: Tensor::rand(0f32, 1.0, vec![t, v, 2, h, h], &Device::Cpu).unwrap(),
            reference: vec![false; t],
            view_valid: vec![true; v],
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn output_has_input_shape() {
        let store = ParamStore::new(0);
        let m = CvDit::new(&tiny(), store.vb()).unwrap();
        for (t, v, h) in [(3, 2, 4), (1, 1, 2), (5, 3, 6)] {
            let z = Tensor::randn(0f32, 1.0, vec![t, v, 4, h, h], &Device::Cpu).unwrap();
            let out = m.forward(&z, 0.4, &bundle(t, v, h), BlockMask::ALL).unwrap();
            assert_eq!(out.dims(), z.dims());
        }
    }

    #[test]
    fn fresh_appended_blocks_are_identity() {
        let store = ParamStore::new(1);
        let m = CvDit::new(&tiny(), store.vb()).unwrap();
        let z = Tensor::randn(0f32, 1.0, vec![3, 2, 4, 4, 4], &Device::Cpu).unwrap();
        let c = bundle(3, 2, 4);
        let full = m.forward(&z, 0.3, &c, BlockMask::ALL).unwrap();
        let spatial = m.forward(&z, 0.3, &c, BlockMask::SPATIAL_ONLY).unwrap();
        assert_eq!(max_diff(&full, &spatial), 0.0);
        assert!(scalar(&full.abs().unwrap().max_all().unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn rejects_boundary_times() {
        let store = ParamStore::new(2);
        let m = CvDit::new(&tiny(), store.vb()).unwrap();
        let z = Tensor::zeros(vec![1, 1, 4, 2, 2], candle_core::DType::F32, &Device::Cpu).unwrap();
        for t in [0.0, 1.0, -0.5, 1.5] {
            assert!(m.forward(&z, t, &bundle(1, 1, 2), BlockMask::ALL).is_err());
        }
    }

    #[test]
    fn conditioning_changes_output() {
        let store = ParamStore::new(3);
        let m = CvDit::new(&tiny(), store.vb()).unwrap();
        let z = Tensor::randn(0f32, 1.0, vec![2, 2, 4, 4, 4], &Device::Cpu).unwrap();
        let c = bundle(2, 2, 4);
        let a = m.forward(&z, 0.5, &c, BlockMask::ALL).unwrap();
        let b = m.forward(&z, 0.5, &c.unconditional().unwrap(), BlockMask::ALL).unwrap();
        assert!(max_diff(&a, &b) > 0.0);
        let again = m.forward(&z, 0.5, &c, BlockMask::ALL).unwrap();
        assert_eq!(max_diff(&a, &again), 0.0);
    }
}
