//! Configuration, checkpoints, training, generation, reconstruction and
//! evaluation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod generate;
pub mod metrics;
pub mod train;

use std::collections::BTreeMap;

use candle_core::DType;

pub use ablation::{frechet_latent, run_ref_frames, run_storm_vae, AblationReport, ArmResult, FrechetMode};
pub use checkpoint::Checkpoint;
pub use config::{OptimConfig, RunConfig, Stage, TrainConfig};
pub use generate::{generate, reconstruct4d, reconstruction_windows, Generation, Reconstruction};
pub use metrics::{absrel, delta1, drmse, frechet_distance, psnr, MetricsReport};
pub use train::{
    encode_latents, load_vae, strict_mode, train_diffusion, train_vae, DiffusionModel, DiffusionRun, LatentClip, StepRecord, VaeRun,
};

use crate::error::Result;
use crate::stormvae::{clip_frames, render_targets, StormVae, Target};
use crate::synthworld::MultiViewClip;

/// Context-frame reconstruction quality of a VAE: image-branch PSNR and the
/// PSNR and depth metrics of Gaussian renders at the context cameras.
pub fn evaluate_vae(vae: &StormVae, clips: &[MultiViewClip]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for clip in clips {
        let ctx: Vec<usize> = (0..4).map(|i| ((i * (clip.n_frames - 1)) as f64 / 3.0).round() as usize).collect();
        let x = clip_frames(clip, &ctx, vae.dtype())?;
        let stats = vae.encode(&x)?;
        let recon = vae.decode(&stats.mean)?.detach();
        let xs: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let rs: Vec<f32> = recon.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut m = BTreeMap::new();
        m.insert("image_psnr".to_string(), psnr(&xs, &rs)?);

        let v = clip.n_views;
        let (_, c, h, w) = stats.mean.dims4()?;
        let lat = stats.mean.detach().reshape((4, v, c, h, w))?;
        let times: Vec<f64> = ctx.iter().map(|&t| clip.timestamps[t]).collect();
        let cams: Vec<_> = ctx.iter().flat_map(|&t| (0..v).map(move |vi| (t, vi))).map(|(t, vi)| *clip.camera(t, vi)).collect();
        let out = vae.gs_decode(&lat, &times, &cams, &clip.view_valid)?;
        let mut targets = Vec::new();
        for (i, &t) in ctx.iter().enumerate() {
            for vi in (0..v).filter(|&vi| clip.view_valid[vi]) {
                targets.push((t, vi, Target { camera: cams[i * v + vi], time: times[i], view: vi }));
            }
        }
        let renders = render_targets(&out, &targets.iter().map(|x| x.2).collect::<Vec<_>>(), &vae.cfg.splat)?;
        let (mut gt_rgb, mut pr_rgb, mut gt_d, mut pr_d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((t, vi, _), r) in targets.iter().zip(&renders) {
            gt_rgb.extend_from_slice(clip.image(*t, *vi));
            pr_rgb.extend(r.rgb.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
            gt_d.extend_from_slice(clip.depth_map(*t, *vi));
            pr_d.extend(r.depth.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        let mask: Vec<bool> = gt_d.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        m.insert("render_psnr".to_string(), psnr(&gt_rgb, &pr_rgb)?);
        if mask.iter().any(|&b| b) {
            m.insert("drmse".to_string(), drmse(&gt_d, &pr_d, &mask)?);
            m.insert("absrel".to_string(), absrel(&gt_d, &pr_d, &mask)?);
            m.insert("delta1".to_string(), delta1(&gt_d, &pr_d, &mask)?);
        }
        report.per_clip.insert(clip.id.clone(), m);
    }
    report.aggregate();
    Ok(report)
}
