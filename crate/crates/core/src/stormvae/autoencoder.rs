//! Per-image convolutional encoder and image decoder.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, VarBuilder};

use super::{PosteriorStats, VaeConfig, LOGVAR_MAX, LOGVAR_MIN};
use crate::error::{Error, Result};
use crate::nn::{conv3x3, ResBlock};

fn levels(f: usize) -> usize {
    f.trailing_zeros() as usize
}

fn width_at(base: usize, level: usize) -> usize {
    if level == 0 {
        base
    } else {
        2 * base
    }
}

fn norm(ch: usize, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    let g = [8, 4, 2, 1].into_iter().find(|g| ch % g == 0).unwrap_or(1);
    candle_nn::group_norm(g, ch, 1e-6, vb)
}

/// `[N, 3, H, W]` images to posterior stats `[N, C, H/f, W/f]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    factor: usize,
}

impl Encoder {
    pub fn new(cfg: &VaeConfig, vb: VarBuilder) -> Result<Self> {
        let n = levels(cfg.downsample);
        let base = cfg.base_channels;
        let conv_in = conv3x3(3, base, 1, vb.pp("conv_in"))?;
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let (cin, cout) = (width_at(base, i), width_at(base, i + 1));
            let vs = vb.pp(format!("down{i}"));
            stages.push((ResBlock::new(cin, cout, vs.pp("res"))?, conv3x3(cout, cout, 2, vs.pp("down"))?));
        }
        let top = width_at(base, n);
        Ok(Self {
            conv_in,
            stages,
            mid: ResBlock::new(top, top, vb.pp("mid"))?,
            norm_out: norm(top, vb.pp("norm_out"))?,
            conv_out: conv3x3(top, 2 * cfg.latent_channels, 1, vb.pp("conv_out"))?,
            factor: cfg.downsample,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<PosteriorStats> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(format!(
                "encoder expects [N, 3, H, W] with H, W divisible by {}, got {:?}",
                self.factor,
                x.dims()
            )));
        }
        let mut h = self.conv_in.forward(x)?;
        for (res, down) in &self.stages {
            h = down.forward(&res.forward(&h)?)?;
        }
        let h = self.mid.forward(&h)?;
        let h = self.conv_out.forward(&candle_nn::ops::silu(&self.norm_out.forward(&h)?)?)?;
        let ch = h.dim(1)? / 2;
        Ok(PosteriorStats {
            mean: h.narrow(1, 0, ch)?,
            logvar: h.narrow(1, ch, ch)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
        })
    }
}

/// `[N, C, h, w]` latents to `[N, 3, h·f, w·f]` images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageDecoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Conv2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    channels: usize,
}

impl ImageDecoder {
    pub fn new(cfg: &VaeConfig, vb: VarBuilder) -> Result<Self> {
        let n = levels(cfg.downsample);
        let base = cfg.base_channels;
        let top = width_at(base, n);
        let mut stages = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let (cin, cout) = (width_at(base, i + 1), width_at(base, i));
            let vs = vb.pp(format!("up{i}"));
            stages.push((conv3x3(cin, cin, 1, vs.pp("up"))?, ResBlock::new(cin, cout, vs.pp("res"))?));
        }
        Ok(Self {
            conv_in: conv3x3(cfg.latent_channels, top, 1, vb.pp("conv_in"))?,
            mid: ResBlock::new(top, top, vb.pp("mid"))?,
            stages,
            norm_out: norm(base, vb.pp("norm_out"))?,
            conv_out: conv3x3(base, 3, 1, vb.pp("conv_out"))?,
            channels: cfg.latent_channels,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("decoder expects {} latent channels, got {c}", self.channels)));
        }
        let mut x = self.mid.forward(&self.conv_in.forward(z)?)?;
        let (mut hh, mut ww) = (h, w);
        for (up, res) in &self.stages {
            hh *= 2;
            ww *= 2;
            x = res.forward(&up.forward(&x.upsample_nearest2d(hh, ww)?)?)?;
        }
        let x = self.conv_out.forward(&candle_nn::ops::silu(&self.norm_out.forward(&x)?)?)?;
        Ok(candle_nn::ops::sigmoid(&x)?)
    }
}
