//! Fréchet-latent proxies and the two directional ablations.
//!
//! Features come from a fixed evaluator encoder: spatially pooled posterior
//! means per frame-view (image mode), or the per-view concatenation of those
//! over time (video mode).

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use super::config::RunConfig;
use super::generate::generate;
use super::metrics::frechet_distance;
use super::train::{train_diffusion, train_vae, DiffusionModel};
use crate::cvdiffusion::SampleOptions;
use crate::error::{Error, Result};
use crate::stormvae::{clip_frames, StormVae};
use crate::synthworld::MultiViewClip;

/// Seed of the untrained evaluator encoder shared by all arms.
pub const EVALUATOR_SEED: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrechetMode {
    Image,
    Video,
}

/// Evaluator whose features are comparable across arms.
pub fn evaluator(cfg: &RunConfig) -> Result<StormVae> {
    StormVae::new(&cfg.vae, EVALUATOR_SEED)
}

/// First `frames` frames of `clip` as `[T, V, 3, H, W]`.
pub fn clip_video(clip: &MultiViewClip, frames: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..frames.min(clip.n_frames)).collect();
    let x = clip_frames(clip, &idx, DType::F32)?;
    Ok(x.reshape(vec![idx.len(), clip.n_views, 3, clip.height, clip.width])?)
}

/// Pooled encoder means `[T, V, C]` of a `[T, V, 3, H, W]` video.
fn pooled(evaluator: &StormVae, video: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    let (t, v, c, h, w) = video.dims5()?;
    let x = video.reshape((t * v, c, h, w))?.to_dtype(evaluator.dtype())?;
    let m = evaluator.encode(&x)?.mean.detach().mean((2, 3))?.to_dtype(DType::F64)?;
    let rows: Vec<Vec<f64>> = m.to_vec2()?;
    Ok((0..t).map(|ti| rows[ti * v..(ti + 1) * v].to_vec()).collect())
}

pub fn features(evaluator: &StormVae, videos: &[Tensor], mode: FrechetMode) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for video in videos {
        let p = pooled(evaluator, video)?;
        match mode {
            FrechetMode::Image => out.extend(p.into_iter().flatten()),
            FrechetMode::Video => {
                let nv = p[0].len();
                for v in 0..nv {
                    out.push(p.iter().flat_map(|frame| frame[v].iter().copied()).collect());
                }
            }
        }
    }
    Ok(out)
}

/// Fréchet distance between evaluator features of two sets of videos.
pub fn frechet_latent(evaluator: &StormVae, real: &[Tensor], generated: &[Tensor], mode: FrechetMode) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Metric("Fréchet proxies need at least two clips per side".into()));
    }
    frechet_distance(&features(evaluator, real, mode)?, &features(evaluator, generated, mode)?)
}

/// Proxies of one arm under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub image: f64,
    pub video: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub n: usize,
    pub image_mean: f64,
    pub image_std: f64,
    pub video_mean: f64,
    pub video_std: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = if x.len() > 1 { (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

/// Per-arm mean and sample standard deviation, in order of first
/// appearance. Refuses results trained for different step counts.
pub fn summarize(results: &[ArmResult]) -> Result<Vec<ArmSummary>> {
    if let Some(first) = results.first() {
        if results.iter().any(|r| r.steps != first.steps) {
            return Err(Error::Metric("arms were trained for different step counts".into()));
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&ArmResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(&r.arm) {
            order.push(r.arm.clone());
        }
        groups.entry(r.arm.clone()).or_default().push(r);
    }
    Ok(order
        .into_iter()
        .map(|arm| {
            let g = &groups[&arm];
            let (im, is) = mean_std(&g.iter().map(|r| r.image).collect::<Vec<_>>());
            let (vm, vs) = mean_std(&g.iter().map(|r| r.video).collect::<Vec<_>>());
            ArmSummary {
                arm,
                n: g.len(),
                image_mean: im,
                image_std: is,
                video_mean: vm,
                video_std: vs,
            }
        })
        .collect())
}

/// `better` is lower than `worse` by more than either arm's across-seed
/// standard deviation.
pub fn lower_with_margin(better_mean: f64, better_std: f64, worse_mean: f64, worse_std: f64) -> bool {
    worse_mean - better_mean > better_std.max(worse_std)
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub name: String,
    pub results: Vec<ArmResult>,
    pub summaries: Vec<ArmSummary>,
    /// Named directional checks.
    pub verdicts: Vec<(String, bool)>,
    /// Markdown table.
    pub table: String,
}

fn table(header: &str, rows: &[ArmSummary]) -> String {
    let mut s = format!("| {header} | image Fréchet proxy | video Fréchet proxy |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            r.arm, r.image_mean, r.image_std, r.video_mean, r.video_std
        ));
    }
    s
}

fn sample_options(cfg: &RunConfig, seed: u64) -> SampleOptions {
    SampleOptions {
        steps: cfg.diffusion.steps,
        seed,
        guidance: cfg.diffusion.guidance,
    }
}

/// Proxies of videos generated with `n_ref` references against the real clips.
pub fn evaluate_generation(
    cfg: &RunConfig,
    model: &DiffusionModel,
    vae: &StormVae,
    evaluator: &StormVae,
    clips: &[MultiViewClip],
    n_ref: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let horizon = cfg.train.window_frames;
    let mut real = Vec::new();
    let mut generated = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let g = generate(model, vae, clip, n_ref, horizon, horizon, sample_options(cfg, seed.wrapping_add(1000 * i as u64)))?;
        generated.push(g.images);
        real.push(clip_video(clip, horizon)?);
    }
    Ok((
        frechet_latent(evaluator, &real, &generated, FrechetMode::Image)?,
        frechet_latent(evaluator, &real, &generated, FrechetMode::Video)?,
    ))
}

/// Reference-count ablation: one trained model evaluated with 0, 1 and 3
/// references under each sampling seed.
pub fn run_ref_frames(
    cfg: &RunConfig,
    model: &DiffusionModel,
    vae: &StormVae,
    clips: &[MultiViewClip],
    seeds: &[u64],
    steps: usize,
) -> Result<AblationReport> {
    let ev = evaluator(cfg)?;
    let mut results = Vec::new();
    for &seed in seeds {
        for n_ref in [0, 1, 3] {
            let (image, video) = evaluate_generation(cfg, model, vae, &ev, clips, n_ref, seed)?;
            results.push(ArmResult {
                arm: format!("{n_ref} ref"),
                seed,
                steps,
                image,
                video,
            });
        }
    }
    let summaries = summarize(&results)?;
    let (r0, r3) = (&summaries[0], &summaries[2]);
    let verdicts = vec![(
        "video proxy lower with 3 references than with 0".to_string(),
        lower_with_margin(r3.video_mean, r3.video_std, r0.video_mean, r0.video_std),
    )];
    Ok(AblationReport {
        name: "ref_frames".into(),
        table: table("reference frames", &summaries),
        results,
        summaries,
        verdicts,
    })
}

/// Latent-space ablation: per seed, trains a plain VAE (`λ = 0`) and a
/// rendering-supervised VAE, then a diffusion model on each for equal
/// steps, and compares proxies of unreferenced generations.
pub fn run_storm_vae(cfg: &RunConfig, train_clips: &[MultiViewClip], eval_clips: &[MultiViewClip], seeds: &[u64]) -> Result<AblationReport> {
    let ev = evaluator(cfg)?;
    let mut results = Vec::new();
    for &seed in seeds {
        for (arm, lambda) in [("w/o rendering loss", 0.0), ("w/ rendering loss", cfg.vae.weights.lambda)] {
            let mut c = cfg.clone();
            c.seed = seed;
            c.vae.weights.lambda = lambda;
            let vae = train_vae(&c, train_clips, None)?.model;
            let diff = train_diffusion(&c, &vae, train_clips, None)?.model;
            let (image, video) = evaluate_generation(&c, &diff, &vae, &ev, eval_clips, 0, seed)?;
            log::info!("{arm} seed {seed}: image {image:.4} video {video:.4}");
            results.push(ArmResult {
                arm: arm.to_string(),
                seed,
                steps: c.train.diffusion_steps,
                image,
                video,
            });
        }
    }
    let summaries = summarize(&results)?;
    let (plain, storm) = (&summaries[0], &summaries[1]);
    let verdicts = vec![
        (
            "image proxy lower with rendering loss".to_string(),
            lower_with_margin(storm.image_mean, storm.image_std, plain.image_mean, plain.image_std),
        ),
        (
            "video proxy lower with rendering loss".to_string(),
            lower_with_margin(storm.video_mean, storm.video_std, plain.video_mean, plain.video_std),
        ),
    ];
    Ok(AblationReport {
        name: "storm_vae".into(),
        table: table("latent space", &summaries),
        results,
        summaries,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(arm: &str, seed: u64, steps: usize, image: f64, video: f64) -> ArmResult {
        ArmResult {
            arm: arm.into(),
            seed,
            steps,
            image,
            video,
        }
    }

    #[test]
    fn summaries_keep_order_and_statistics() {
        let res = vec![r("b", 0, 5, 1.0, 4.0), r("a", 0, 5, 2.0, 5.0), r("b", 1, 5, 3.0, 6.0), r("a", 1, 5, 2.0, 5.0)];
        let s = summarize(&res).unwrap();
        assert_eq!(s[0].arm, "b");
        assert_eq!(s[0].image_mean, 2.0);
        assert!((s[0].image_std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].image_std, 0.0);
    }

    #[test]
    fn mismatched_steps_are_refused() {
        assert!(summarize(&[r("a", 0, 5, 1.0, 1.0), r("b", 0, 6, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn margin_rule() {
        assert!(lower_with_margin(1.0, 0.1, 2.0, 0.2));
        assert!(!lower_with_margin(1.0, 1.5, 2.0, 0.2));
        assert!(!lower_with_margin(2.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn self_comparison_is_zero() {
        let cfg = RunConfig {
            vae: crate::stormvae::VaeConfig {
                base_channels: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let ev = evaluator(&cfg).unwrap();
        let vids: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand(0f32, 1.0, vec![2, 2, 3, 16, 16], &candle_core::Device::Cpu).unwrap())
            .collect();
        for mode in [FrechetMode::Image, FrechetMode::Video] {
            assert!(frechet_latent(&ev, &vids, &vids, mode).unwrap().abs() < 1e-6);
        }
        assert_eq!(features(&ev, &vids, FrechetMode::Video).unwrap()[0].len(), 2 * 8);
        assert!(frechet_latent(&ev, &vids[..1], &vids, FrechetMode::Image).is_err());
    }
}
