//! Raw grids to a rendered target view, with gradients back to the grids.
//!
//! [`SplatRenderOp`] wraps the pipeline as a candle custom op so decoder
//! heads can be trained through the renderer.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use super::gaussian::{decode_raw, decode_raw_backward, transport, GaussianSet, GridGrad, PixelGaussianGrid, GRID_CHANNELS};
use super::render::{rasterize, rasterize_backward, RenderGrad, RenderOutput};
use super::SplatConfig;
use crate::error::{Error, Result};
use crate::synthworld::CameraModel;

/// Output channels of the custom op: rgb, depth, alpha.
pub const RENDER_CHANNELS: usize = 5;

fn union_at(grids: &[PixelGaussianGrid], t: f64, cfg: &SplatConfig) -> Result<(GaussianSet, Vec<usize>)> {
    let mut sets = Vec::with_capacity(grids.len());
    let mut sizes = Vec::with_capacity(grids.len());
    for g in grids {
        let s = transport(&decode_raw(g, cfg)?, t);
        sizes.push(s.len());
        sets.push(s);
    }
    Ok((GaussianSet::union(&sets), sizes))
}

/// Decodes every grid, moves all primitives to `t`, and renders the union.
pub fn render_grids(grids: &[PixelGaussianGrid], target: &CameraModel, t: f64, cfg: &SplatConfig) -> Result<RenderOutput> {
    let (set, _) = union_at(grids, t, cfg)?;
    rasterize(&set, target, cfg)
}

pub fn render_grids_backward(
    grids: &[PixelGaussianGrid],
    target: &CameraModel,
    t: f64,
    cfg: &SplatConfig,
    grad: &RenderGrad,
) -> Result<Vec<GridGrad>> {
    let (set, sizes) = union_at(grids, t, cfg)?;
    let all = rasterize_backward(&set, target, cfg, grad)?;
    let mut out = Vec::with_capacity(grids.len());
    let mut off = 0;
    for (g, n) in grids.iter().zip(sizes) {
        out.push(decode_raw_backward(g, cfg, &all[off..off + n], t)?);
        off += n;
    }
    Ok(out)
}

/// Renders `[n_sources, h, w, 15]` raw grids into a `[H, W, 5]` target buffer.
#[derive(Debug, Clone)]
pub struct SplatRenderOp {
    /// Camera and capture time per source grid.
    pub sources: Vec<(CameraModel, f64)>,
    pub target: CameraModel,
    pub target_time: f64,
    pub cfg: SplatConfig,
}

impl SplatRenderOp {
    fn grids(&self, data: &[f64]) -> Result<Vec<PixelGaussianGrid>> {
        let mut grids = Vec::with_capacity(self.sources.len());
        let mut off = 0;
        for (cam, time) in &self.sources {
            let n = cam.height * cam.width * GRID_CHANNELS;
            let chunk = data
                .get(off..off + n)
                .ok_or_else(|| Error::shape("raw tensor smaller than the source grids"))?;
            grids.push(PixelGaussianGrid::from_interleaved(chunk, *cam, *time)?);
            off += n;
        }
        if off != data.len() {
            return Err(Error::shape("raw tensor larger than the source grids"));
        }
        Ok(grids)
    }

    /// Applies the op to a `[n_sources, h, w, 15]` tensor without recording gradients.
    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        ensure_finite(raw)?;
        Ok(raw.apply_op1_no_bwd(self)?)
    }

    /// Differentiable application (gradients flow back into `raw`).
    pub fn forward(&self, raw: &Tensor) -> Result<Tensor> {
        ensure_finite(raw)?;
        Ok(raw.apply_op1(self.clone())?)
    }
}

fn ensure_finite(raw: &Tensor) -> Result<()> {
    let s = raw.abs()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Invariant("non-finite Gaussian parameters".into()))
    }
}

/// Input values as `f64`, plus whether the input was `f64` already.
fn contiguous_values(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(Vec<f64>, bool)> {
    let Some((a, b)) = layout.contiguous_offsets() else {
        candle_core::bail!("splat render expects a contiguous input");
    };
    match storage {
        CpuStorage::F32(v) => Ok((v[a..b].iter().map(|&x| x as f64).collect(), false)),
        CpuStorage::F64(v) => Ok((v[a..b].to_vec(), true)),
        _ => candle_core::bail!("splat render expects f32 or f64 input"),
    }
}

impl CustomOp1 for SplatRenderOp {
    fn name(&self) -> &'static str {
        "splat-render"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (data, is_f64) = contiguous_values(storage, layout)?;
        let grids = self.grids(&data).map_err(candle_core::Error::wrap)?;
        let out = render_grids(&grids, &self.target, self.target_time, &self.cfg).map_err(candle_core::Error::wrap)?;
        let (h, w) = (self.target.height, self.target.width);
        let mut buf = Vec::with_capacity(h * w * RENDER_CHANNELS);
        for p in 0..h * w {
            buf.extend_from_slice(&out.rgb[p * 3..p * 3 + 3]);
            buf.push(out.depth[p]);
            buf.push(out.alpha[p]);
        }
        let storage = if is_f64 {
            CpuStorage::F64(buf)
        } else {
            CpuStorage::F32(buf.into_iter().map(|v| v as f32).collect())
        };
        Ok((storage, Shape::from((h, w, RENDER_CHANNELS))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let data: Vec<f64> = arg.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let g: Vec<f64> = grad_res.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let (h, w) = (self.target.height, self.target.width);
        let mut rg = RenderGrad::zeros(h, w);
        for p in 0..h * w {
            let px = &g[p * RENDER_CHANNELS..(p + 1) * RENDER_CHANNELS];
            for c in 0..3 {
                rg.rgb[p * 3 + c] = px[c];
            }
            rg.depth[p] = px[3];
            rg.alpha[p] = px[4];
        }
        let grids = self.grids(&data).map_err(candle_core::Error::wrap)?;
        let grads = render_grids_backward(&grids, &self.target, self.target_time, &self.cfg, &rg)
            .map_err(candle_core::Error::wrap)?;
        let flat: Vec<f64> = grads.iter().flat_map(|gg| gg.interleaved()).collect();
        Ok(Some(Tensor::from_vec(flat, arg.shape(), arg.device())?.to_dtype(arg.dtype())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splatcore::gaussian::RAW_CHANNELS;
    use candle_core::{Device, Var};

    fn setup() -> (SplatRenderOp, Vec<f32>) {
        let src = CameraModel::identity(1.0, 1.0, 0.5, 0.5, 2, 2);
        let target = CameraModel::identity(4.0, 4.0, 4.0, 4.0, 8, 8);
        let mut data = vec![0f32; 4 * GRID_CHANNELS];
        for p in 0..4 {
            let px = &mut data[p * GRID_CHANNELS..(p + 1) * GRID_CHANNELS];
            px[0] = -2.5 + 0.2 * p as f32;
            px[1] = 1.0;
            px[2] = 0.1 * p as f32;
            for c in 5..8 {
                px[c] = -1.0;
            }
            px[8] = 0.5;
            px[9 + p % 3] = 1.5;
            px[RAW_CHANNELS] = 0.2;
        }
        let op = SplatRenderOp {
            sources: vec![(src, 0.0)],
            target,
            target_time: 0.5,
            cfg: SplatConfig::default(),
        };
        (op, data)
    }

    #[test]
    fn op_matches_pipeline() {
        let (op, data) = setup();
        let t = Tensor::from_vec(data.clone(), (1, 2, 2, GRID_CHANNELS), &Device::Cpu).unwrap();
        let out = op.apply(&t).unwrap();
        assert_eq!(out.dims(), &[8, 8, 5]);
        let vals: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        let grid = PixelGaussianGrid::from_interleaved(&vals, op.sources[0].0, 0.0).unwrap();
        let direct = render_grids(&[grid], &op.target, 0.5, &op.cfg).unwrap();
        let flat: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        assert!((flat[3 * 5 + 4] as f64 - direct.alpha[3]).abs() < 1e-6);
    }

    #[test]
    fn op_backward_reaches_raw() {
        let (op, data) = setup();
        let v = Var::from_vec(data, (1, 2, 2, GRID_CHANNELS), &Device::Cpu).unwrap();
        let out = op.forward(v.as_tensor()).unwrap();
        let loss = out.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(v.as_tensor()).unwrap();
        assert_eq!(g.dims(), &[1, 2, 2, GRID_CHANNELS]);
        let flat: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
        assert!(flat.iter().any(|&x| x != 0.0));
    }
}
