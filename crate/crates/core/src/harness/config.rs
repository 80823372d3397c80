//! Run configuration, read from TOML and echoed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cvdiffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::stormvae::VaeConfig;
use crate::synthworld::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Vae,
    Diffusion,
}

/// AdamW with cosine decay from `lr` to `min_lr` over the stage's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            min_lr: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > self.min_lr && self.min_lr > 0.0) {
            return Err(Error::config("learning rates must satisfy lr > min_lr > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("invalid AdamW hyperparameters"));
        }
        Ok(())
    }

    /// Cosine-decayed rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = if total <= 1 { 0.0 } else { step.min(total - 1) as f64 / (total - 1) as f64 };
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub vae_steps: usize,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Frames per diffusion training window.
    pub window_frames: usize,
    /// Probabilities of 0, 1 and 3 reference frames per diffusion sample.
    pub reference_mix: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vae_steps: 1000,
            diffusion_steps: 1000,
            batch_size: 2,
            checkpoint_every: 0,
            log_every: 10,
            window_frames: 7,
            reference_mix: [0.3, 0.2, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub stage: Stage,
    pub seed: u64,
    pub synth: SynthConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
            stage: Stage::Vae,
            seed: 0,
            synth: SynthConfig::default(),
            vae: VaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.diffusion.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if t.window_frames < 4 || t.window_frames > self.diffusion.max_frames {
            return Err(Error::config("diffusion windows need 4..=max_frames frames"));
        }
        let s: f64 = t.reference_mix.iter().sum();
        if t.reference_mix.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config("reference mix must be a probability vector"));
        }
        if self.vae.latent_channels != self.diffusion.latent_channels {
            return Err(Error::config("VAE and diffusion latent channels differ"));
        }
        Ok(())
    }

    /// Configuration as JSON for echoing into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[optim]\nlr = 1e-3\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.optim.lr, 1e-3);
        assert_eq!(cfg.optim.min_lr, 1e-7);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn nested_tables_parse() {
        let text = "seed = 0\ndataset = \"data\"\noutput = \"runs\"\n[synth]\nclips = 200\nviews = 6\n[vae]\nlatent_channels = 8\ndownsample = 4\n[vae.weights]\nlambda = 0.5\n[diffusion]\nunits = 2\nwidth = 128\nheads = 4\nsteps = 50\n[train]\nwindow_frames = 7\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.synth.clips, 200);
        assert_eq!(cfg.vae.weights.lambda, 0.5);
        assert_eq!(cfg.diffusion.width, 128);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(RunConfig::from_toml("[optim]\nlr = 1e-8\n").is_err());
        assert!(RunConfig::from_toml("[optim]\nmin_lr = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nreference_mix = [0.5, 0.5, 0.5]\n").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0, 100), 6e-5);
        assert!((o.lr_at(99, 100) - 1e-7).abs() < 1e-20);
        let mid = o.lr_at(50, 101);
        assert!((mid - (1e-7 + 0.5 * (6e-5 - 1e-7))).abs() < 1e-15);
        assert!((1..100).all(|s| o.lr_at(s, 100) <= o.lr_at(s - 1, 100)));
    }
}
