//! Two-stage training: the VAE first, then the diffusion model on frozen
//! encoder latents.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{OptimConfig, RunConfig};
use crate::cvdiffusion::{block_dropout, flow_loss, make_flow_sample, ConditionBundle, CvDit, DiffusionConfig, FlowSample};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::stormvae::{scalar, StormVae};
use crate::synthworld::MultiViewClip;

pub const VAE_KIND: &str = "vae";
pub const DIFFUSION_KIND: &str = "diffusion";

/// Environment variable enabling strict determinism checks.
pub const STRICT_ENV: &str = "SPLATWORLD_STRICT";

pub fn strict_mode() -> bool {
    std::env::var(STRICT_ENV).map(|v| !v.is_empty() && v != "0").unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub batch: Vec<String>,
    pub losses: Vec<(String, f64)>,
}

impl StepRecord {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

fn adamw(vars: Vec<candle_core::Var>, o: &OptimConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?)
}

fn check_finite(store: &ParamStore, step: usize, batch: &[String]) -> Result<()> {
    for (name, var) in store.named_vars() {
        let s = scalar(&var.as_tensor().abs()?.sum_all()?)?;
        if !s.is_finite() {
            return Err(Error::Diverged {
                step,
                batch: batch.join(","),
                reason: format!("parameter {name} is not finite"),
            });
        }
    }
    Ok(())
}

/// Writes a diagnostic dump and returns the divergence error.
fn diverged(out: Option<&Path>, stage: &str, step: usize, batch: &[String], losses: &[(String, f64)]) -> Error {
    diverged_because(out, stage, step, batch, losses, format!("non-finite loss {losses:?}"))
}

fn diverged_because(out: Option<&Path>, stage: &str, step: usize, batch: &[String], losses: &[(String, f64)], reason: String) -> Error {
    if let Some(dir) = out {
        let dump = serde_json::json!({"stage": stage, "step": step, "batch": batch, "losses": losses, "reason": reason});
        let path = dir.join(format!("{stage}_diverged_step{step}.json"));
        if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, dump.to_string())) {
            log::error!("could not write divergence dump {}: {e}", path.display());
        }
    }
    Error::Diverged {
        step,
        batch: batch.join(","),
        reason,
    }
}

struct Logger {
    file: Option<std::fs::File>,
}

impl Logger {
    fn new(out: Option<&Path>, name: &str) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join(name))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn record(&mut self, r: &StepRecord, every: usize, stage: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        if every > 0 && r.step % every == 0 {
            let parts: Vec<String> = r.losses.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
            log::info!("{stage} step {} lr {:.2e} {}", r.step, r.lr, parts.join(" "));
        }
        Ok(())
    }
}

fn checkpoint_path(out: &Path, kind: &str, step: Option<usize>) -> PathBuf {
    match step {
        Some(s) => out.join(format!("{kind}_step{s:06}.ckpt")),
        None => out.join(format!("{kind}.ckpt")),
    }
}

pub fn vae_checkpoint(model: &StormVae, step: usize, cfg: &RunConfig) -> Checkpoint {
    Checkpoint::from_store(VAE_KIND, step as u64, serde_json::json!({ "run": cfg.echo() }), &model.store)
}

/// Rebuilds a VAE from a checkpoint and the configuration echoed into it.
pub fn load_vae(ck: &Checkpoint) -> Result<(StormVae, RunConfig)> {
    ck.expect_kind(VAE_KIND)?;
    let cfg: RunConfig = serde_json::from_value(ck.config["run"].clone())?;
    let model = StormVae::new(&cfg.vae, cfg.seed)?;
    ck.restore(&model.store)?;
    Ok((model, cfg))
}

pub struct VaeRun {
    pub model: StormVae,
    pub log: Vec<StepRecord>,
}

/// Optimizes encoder, image decoder and Gaussian decoder jointly for
/// `cfg.train.vae_steps` steps.
pub fn train_vae(cfg: &RunConfig, clips: &[MultiViewClip], out: Option<&Path>) -> Result<VaeRun> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::NoClips(cfg.dataset.clone()));
    }
    let model = StormVae::new(&cfg.vae, cfg.seed)?;
    let mut opt = adamw(model.store.vars(), &cfg.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5641_4500);
    let total = cfg.train.vae_steps;
    let mut logger = Logger::new(out, "vae_log.jsonl")?;
    let mut log = Vec::with_capacity(total);
    let strict = strict_mode();
    for step in 0..total {
        let lr = cfg.optim.lr_at(step, total);
        opt.set_learning_rate(lr);
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        let mut sum: Option<Tensor> = None;
        let mut acc: Vec<(String, f64)> = Vec::new();
        for _ in 0..cfg.train.batch_size {
            let clip = &clips[rng.random_range(0..clips.len())];
            batch.push(clip.id.clone());
            let l = match model.step_losses(clip, &mut rng) {
                Ok(l) => l,
                Err(e @ (Error::Invariant(_) | Error::Decode { .. })) => return Err(diverged_because(out, VAE_KIND, step, &batch, &acc, e.to_string())),
                Err(e) => return Err(e),
            };
            for (name, v) in l.values()? {
                match acc.iter_mut().find(|(n, _)| n == name) {
                    Some(e) => e.1 += v,
                    None => acc.push((name.to_string(), v)),
                }
            }
            sum = Some(match sum {
                None => l.total,
                Some(s) => (s + l.total)?,
            });
        }
        let n = cfg.train.batch_size as f64;
        for e in acc.iter_mut() {
            e.1 /= n;
        }
        if acc.iter().any(|(_, v)| !v.is_finite()) {
            return Err(diverged(out, VAE_KIND, step, &batch, &acc));
        }
        let loss = (sum.expect("batch is non-empty") / n)?;
        opt.backward_step(&loss)?;
        if strict {
            check_finite(&model.store, step, &batch)?;
        }
        let rec = StepRecord { step, lr, batch, losses: acc };
        logger.record(&rec, cfg.train.log_every, VAE_KIND)?;
        log.push(rec);
        if let Some(dir) = out {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                vae_checkpoint(&model, step + 1, cfg).save(&checkpoint_path(dir, VAE_KIND, Some(step + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        vae_checkpoint(&model, total, cfg).save(&checkpoint_path(dir, VAE_KIND, None))?;
    }
    Ok(VaeRun { model, log })
}

/// Diffusion transformer with its parameters and latent normalization.
pub struct DiffusionModel {
    pub store: ParamStore,
    pub dit: CvDit,
    pub cfg: DiffusionConfig,
    /// Multiplies encoder means before diffusion; divides samples after.
    pub latent_scale: f64,
}

impl DiffusionModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64, latent_scale: f64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let dit = CvDit::new(cfg, store.vb())?;
        Ok(Self {
            store,
            dit,
            cfg: cfg.clone(),
            latent_scale,
        })
    }

    pub fn checkpoint(&self, step: usize, cfg: &RunConfig) -> Checkpoint {
        let echo = serde_json::json!({ "run": cfg.echo(), "latent_scale": self.latent_scale });
        Checkpoint::from_store(DIFFUSION_KIND, step as u64, echo, &self.store)
    }

    pub fn load(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        ck.expect_kind(DIFFUSION_KIND)?;
        let cfg: RunConfig = serde_json::from_value(ck.config["run"].clone())?;
        let scale = ck.config["latent_scale"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("missing latent scale".into()))?;
        let m = Self::new(&cfg.diffusion, cfg.seed, scale)?;
        ck.restore(&m.store)?;
        Ok((m, cfg))
    }
}

/// Scaled posterior means and conditions of one clip.
#[derive(Debug, Clone)]
pub struct LatentClip {
    pub id: String,
    /// `[T, V, C, h, w]`, already multiplied by the latent scale.
    pub latents: Tensor,
    pub cond: ConditionBundle,
}

/// Encodes every clip with the frozen encoder. Returns the clips and the
/// scale that gives the latents unit standard deviation.
pub fn encode_latents(vae: &StormVae, clips: &[MultiViewClip], scale: Option<f64>) -> Result<(Vec<LatentClip>, f64)> {
    let f = vae.cfg.downsample;
    let raw = clips
        .iter()
        .map(|c| Ok((c.id.clone(), vae.encode_clip_means(c)?, ConditionBundle::from_clip(c, &(0..c.n_frames).collect::<Vec<_>>(), f)?)))
        .collect::<Result<Vec<_>>>()?;
    let scale = match scale {
        Some(s) => s,
        None => {
            let (mut s1, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
            for (_, z, _) in &raw {
                let v: Vec<f32> = z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                n += v.len();
                s1 += v.iter().map(|&x| x as f64).sum::<f64>();
                s2 += v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
            }
            let var = s2 / n as f64 - (s1 / n as f64).powi(2);
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        }
    };
    let out = raw
        .into_iter()
        .map(|(id, z, cond)| {
            Ok(LatentClip {
                id,
                latents: (z.to_dtype(DType::F32)? * scale)?,
                cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, scale))
}

/// Reference-frame count drawn from the `{0, 1, 3}` mixture.
pub fn draw_reference_count(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    if u < mix[0] {
        0
    } else if u < mix[0] + mix[1] {
        1
    } else {
        3
    }
}

/// Everything drawn for one diffusion training sample.
pub struct DiffusionDraw {
    pub start: usize,
    pub cond: ConditionBundle,
    pub sample: FlowSample,
    pub mask: crate::cvdiffusion::BlockMask,
}

/// Draws window, reference count, condition dropout, block mask and flow
/// sample for one clip.
pub fn draw_diffusion_sample(cfg: &RunConfig, clip: &LatentClip, rng: &mut ChaCha8Rng) -> Result<DiffusionDraw> {
    let nt = clip.latents.dim(0)?;
    let w = cfg.train.window_frames.min(nt);
    let start = rng.random_range(0..=nt - w);
    let z0 = clip.latents.narrow(0, start, w)?;
    let k = draw_reference_count(&cfg.train.reference_mix, rng).min(w - 1);
    let mut cond = clip.cond.window(start, w)?.with_references(k);
    if rng.random::<f64>() < cfg.diffusion.cond_dropout {
        cond = cond.unconditional()?;
    }
    let mask = block_dropout(&cfg.diffusion, rng);
    let sample = make_flow_sample(&z0, cfg.diffusion.time_distribution, rng)?;
    Ok(DiffusionDraw { start, cond, sample, mask })
}

/// Fails unless no encoder parameter received a nonzero gradient.
pub fn assert_encoder_frozen(vae: &StormVae, grads: &GradStore) -> Result<()> {
    for (name, var) in vae.vars_with_prefix("encoder") {
        if let Some(g) = grads.get(var.as_tensor()) {
            if scalar(&g.abs()?.max_all()?)? != 0.0 {
                return Err(Error::Invariant(format!("encoder parameter {name} received a gradient")));
            }
        }
    }
    Ok(())
}

pub struct DiffusionRun {
    pub model: DiffusionModel,
    pub log: Vec<StepRecord>,
}

/// Trains the diffusion model on posterior means of the frozen encoder.
pub fn train_diffusion(cfg: &RunConfig, vae: &StormVae, clips: &[MultiViewClip], out: Option<&Path>) -> Result<DiffusionRun> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::NoClips(cfg.dataset.clone()));
    }
    let (latents, scale) = encode_latents(vae, clips, None)?;
    let model = DiffusionModel::new(&cfg.diffusion, cfg.seed ^ 0xD1FF, scale)?;
    let mut opt = adamw(model.store.vars(), &cfg.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1FF_0000);
    let total = cfg.train.diffusion_steps;
    let mut logger = Logger::new(out, "diffusion_log.jsonl")?;
    let mut log = Vec::with_capacity(total);
    let strict = strict_mode();
    let encoder_before: Vec<Tensor> = vae.vars_with_prefix("encoder").iter().map(|(_, v)| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
    for step in 0..total {
        let lr = cfg.optim.lr_at(step, total);
        opt.set_learning_rate(lr);
        let mut batch = Vec::new();
        let mut sum: Option<Tensor> = None;
        for _ in 0..cfg.train.batch_size {
            let clip = &latents[rng.random_range(0..latents.len())];
            batch.push(clip.id.clone());
            let d = draw_diffusion_sample(cfg, clip, &mut rng)?;
            let pred = model.dit.forward(&d.sample.zt, d.sample.t, &d.cond, d.mask)?;
            let l = flow_loss(&pred, &d.sample, &d.cond.reference, &d.cond.view_valid)?;
            sum = Some(match sum {
                None => l,
                Some(s) => (s + l)?,
            });
        }
        let loss = (sum.expect("batch is non-empty") / cfg.train.batch_size as f64)?;
        let value = scalar(&loss)?;
        let losses = vec![("flow".to_string(), value)];
        if !value.is_finite() {
            return Err(diverged(out, DIFFUSION_KIND, step, &batch, &losses));
        }
        let grads = loss.backward()?;
        assert_encoder_frozen(vae, &grads)?;
        opt.step(&grads)?;
        if strict {
            check_finite(&model.store, step, &batch)?;
        }
        let rec = StepRecord { step, lr, batch, losses };
        logger.record(&rec, cfg.train.log_every, DIFFUSION_KIND)?;
        log.push(rec);
        if let Some(dir) = out {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                model.checkpoint(step + 1, cfg).save(&checkpoint_path(dir, DIFFUSION_KIND, Some(step + 1)))?;
            }
        }
    }
    for ((name, var), before) in vae.vars_with_prefix("encoder").iter().zip(&encoder_before) {
        if scalar(&(var.as_tensor() - before)?.abs()?.max_all()?)? != 0.0 {
            return Err(Error::Invariant(format!("encoder parameter {name} changed during diffusion training")));
        }
    }
    if let Some(dir) = out {
        model.checkpoint(total, cfg).save(&checkpoint_path(dir, DIFFUSION_KIND, None))?;
    }
    Ok(DiffusionRun { model, log })
}
