//! Autoregressive generation and sliding-window 4D reconstruction.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::train::DiffusionModel;
use crate::cvdiffusion::{autoregress, plan_windows, ConditionBundle, SampleOptions};
use crate::error::{Error, Result};
use crate::splatcore::{decode_raw, GaussianSet, PixelGaussianGrid};
use crate::stormvae::{clip_frames, render_targets, StormVae, Target};
use crate::synthworld::{CameraModel, MultiViewClip};

/// Frames shared by consecutive generation windows.
pub const OVERLAP_FRAMES: usize = 3;

/// Generated latents and decoded frames.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Unscaled latents `[H, V, C, h, w]`.
    pub latents: Tensor,
    /// Decoded images `[H, V, 3, Hi, Wi]` in `[0, 1]`.
    pub images: Tensor,
    /// Window start frames used by the sampler.
    pub windows: Vec<usize>,
}

/// Decodes `[T, V, C, h, w]` latents frame by frame.
pub fn decode_latents(vae: &StormVae, latents: &Tensor) -> Result<Tensor> {
    let (t, v, c, h, w) = latents.dims5()?;
    let flat = latents.reshape((t * v, c, h, w))?.to_dtype(vae.dtype())?;
    let mut parts = Vec::new();
    let chunk = 4 * v;
    let mut i = 0;
    while i < t * v {
        let n = chunk.min(t * v - i);
        parts.push(vae.decode(&flat.narrow(0, i, n)?)?.detach());
        i += n;
    }
    let x = Tensor::cat(&parts, 0)?;
    let (_, ch, hi, wi) = x.dims4()?;
    Ok(x.reshape(vec![t, v, ch, hi, wi])?)
}

/// Samples `horizon` frames conditioned on the rasters and text of `clip`.
/// With `n_ref > 0` the first frames of `clip` are encoded and kept as
/// references.
pub fn generate(
    model: &DiffusionModel,
    vae: &StormVae,
    clip: &MultiViewClip,
    n_ref: usize,
    horizon: usize,
    window: usize,
    opts: SampleOptions,
) -> Result<Generation> {
    if ![0, 1, 3].contains(&n_ref) {
        return Err(Error::config(format!("reference count must be 0, 1 or 3, got {n_ref}")));
    }
    if horizon > clip.n_frames {
        return Err(Error::config(format!("horizon {horizon} exceeds the {} conditioned frames", clip.n_frames)));
    }
    let windows = plan_windows(horizon, window, OVERLAP_FRAMES)?;
    let f = vae.cfg.downsample;
    let (h, w) = (clip.height / f, clip.width / f);
    let c = vae.cfg.latent_channels;
    let v = clip.n_views;
    let cond = ConditionBundle::from_clip(clip, &(0..horizon).collect::<Vec<_>>(), f)?;
    let refs = if n_ref > 0 {
        let frames: Vec<usize> = (0..n_ref).collect();
        let m = vae.encode(&clip_frames(clip, &frames, vae.dtype())?)?.mean.detach();
        Some((m.reshape(vec![n_ref, v, c, h, w])?.to_dtype(DType::F32)? * model.latent_scale)?)
    } else {
        None
    };
    let z = autoregress(&model.dit, &cond, refs.as_ref(), [v, c, h, w], horizon, window, OVERLAP_FRAMES, DType::F32, opts)?;
    let latents = (z / model.latent_scale)?;
    let images = decode_latents(vae, &latents)?;
    Ok(Generation { latents, images, windows })
}

/// Start frames of overlapping reconstruction windows. Windows advance by
/// `window − 1`; a final window is clamped to end at the last frame.
pub fn reconstruction_windows(n_frames: usize, window: usize) -> Result<Vec<usize>> {
    if window < 2 {
        return Err(Error::config("reconstruction windows need at least 2 frames"));
    }
    if n_frames < window {
        return Err(Error::config(format!("{n_frames} frames are fewer than the {window}-frame window")));
    }
    let stride = window - 1;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + window <= n_frames).collect();
    let last = *starts.last().expect("at least one window fits");
    if last + window < n_frames {
        starts.push(n_frames - window);
    }
    Ok(starts)
}

/// Renders and Gaussians of a sliding-window reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub n_frames: usize,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    /// `H×W×3` per `t * V + v`; empty for invalid views.
    pub rgb: Vec<Vec<f32>>,
    /// `H×W` per `t * V + v`; empty for invalid views.
    pub depth: Vec<Vec<f32>>,
    /// Window start that produced each frame.
    pub source_window: Vec<usize>,
    pub windows: Vec<usize>,
    /// Decoded Gaussians of each window, at their source times.
    pub gaussians: Vec<GaussianSet>,
}

/// Decodes each window of `window` adjacent frames with the Gaussian decoder
/// and renders every frame of the window from its own cameras. Frames shared
/// by two windows keep the later window's render.
pub fn reconstruct4d(
    vae: &StormVae,
    latents: &Tensor,
    cameras: &[CameraModel],
    times: &[f64],
    view_valid: &[bool],
    window: usize,
) -> Result<Reconstruction> {
    let (nt, nv, _, _, _) = latents.dims5()?;
    if cameras.len() != nt * nv || times.len() != nt || view_valid.len() != nv {
        return Err(Error::shape("cameras, times and view mask must match the latent grid"));
    }
    let windows = reconstruction_windows(nt, window)?;
    let (height, width) = (cameras[0].height, cameras[0].width);
    let mut rec = Reconstruction {
        n_frames: nt,
        n_views: nv,
        height,
        width,
        rgb: vec![Vec::new(); nt * nv],
        depth: vec![Vec::new(); nt * nv],
        source_window: vec![0; nt],
        windows: windows.clone(),
        gaussians: Vec::new(),
    };
    for &s in &windows {
        let lat = latents.narrow(0, s, window)?.to_dtype(vae.dtype())?;
        let cams = &cameras[s * nv..(s + window) * nv];
        let ts = &times[s..s + window];
        let out = vae.gs_decode(&lat, ts, cams, view_valid)?;
        let mut targets = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            for v in (0..nv).filter(|&v| view_valid[v]) {
                targets.push((s + i, v, Target { camera: cams[i * nv + v], time: t, view: v }));
            }
        }
        let tg: Vec<Target> = targets.iter().map(|x| x.2).collect();
        let renders = render_targets(&out, &tg, &vae.cfg.splat)?;
        for ((t, v, _), r) in targets.iter().zip(renders) {
            rec.rgb[t * nv + v] = r.rgb.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            rec.depth[t * nv + v] = r.depth.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            rec.source_window[*t] = s;
        }
        let grids = out.grids.to_dtype(DType::F64)?;
        let mut sets = Vec::new();
        for (i, &t) in ts.iter().enumerate() {
            for v in (0..nv).filter(|&v| view_valid[v]) {
                let data: Vec<f64> = grids.get(i)?.get(v)?.flatten_all()?.to_vec1()?;
                let grid = PixelGaussianGrid::from_interleaved(&data, cams[i * nv + v], t)?;
                sets.push(decode_raw(&grid, &vae.cfg.splat)?);
            }
        }
        rec.gaussians.push(GaussianSet::union(&sets));
    }
    Ok(rec)
}

/// Writes Gaussians as text: a `#` header, then one line per Gaussian with
/// `mean(3) rotation_wxyz(4) scale(3) opacity color(3) velocity(3) source_time`.
pub fn write_gaussians(path: &Path, set: &GaussianSet, window_start: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# splatworld gaussians v1 window_start={window_start} count={}", set.len())?;
    writeln!(f, "# mx my mz qw qx qy qz sx sy sz opacity r g b vx vy vz source_time")?;
    for g in &set.gaussians {
        let vals: Vec<String> = g
            .mean
            .iter()
            .chain(&g.rotation)
            .chain(&g.scale)
            .chain(std::iter::once(&g.opacity))
            .chain(&g.color)
            .chain(&g.velocity)
            .chain(std::iter::once(&g.source_time))
            .map(|x| format!("{x:.9e}"))
            .collect();
        writeln!(f, "{}", vals.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force: every frame is covered, starts are valid, consecutive
    /// windows share at least one frame and regular starts step by 3.
    fn check(n: usize, starts: &[usize]) {
        assert!(starts.iter().all(|&s| s + 4 <= n));
        for t in 0..n {
            assert!(starts.iter().any(|&s| (s..s + 4).contains(&t)), "{n}: frame {t} uncovered");
        }
        for pair in starts.windows(2) {
            assert!(pair[1] > pair[0] && pair[1] <= pair[0] + 3);
        }
        let regular: Vec<usize> = (0..n).step_by(3).filter(|s| s + 4 <= n).collect();
        assert_eq!(&starts[..regular.len()], &regular[..]);
        assert!(starts.len() <= regular.len() + 1);
    }

    #[test]
    fn window_enumeration_matches_brute_force() {
        for n in 4..=40 {
            check(n, &reconstruction_windows(n, 4).unwrap());
        }
        assert_eq!(reconstruction_windows(19, 4).unwrap(), vec![0, 3, 6, 9, 12, 15]);
        assert_eq!(reconstruction_windows(4, 4).unwrap(), vec![0]);
        assert_eq!(reconstruction_windows(20, 4).unwrap(), vec![0, 3, 6, 9, 12, 15, 16]);
        assert!(reconstruction_windows(3, 4).is_err());
    }
}
