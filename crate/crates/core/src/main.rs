//! Command-line entry point.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use splatworld::cvdiffusion::SampleOptions;
use splatworld::harness::export::{export_sequence, save_depth16, save_rgb, DepthEncoding};
use splatworld::harness::generate::write_gaussians;
use splatworld::harness::{self, Checkpoint, DiffusionModel, MetricsReport, RunConfig};
use splatworld::synthworld::{read_dataset, read_split, synthesize, write_dataset, Split};

#[derive(Parser)]
#[command(name = "splatworld", version, about = "Synthetic multi-view world model toolkit")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationName {
    RefFrames,
    StormVae,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VAE.
    TrainVae {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion model on frozen VAE latents.
    TrainDiffusion {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample videos for the validation clips.
    Generate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long, default_value_t = 3)]
        refs: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Output frames; defaults to one window.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window 4D reconstruction of validation clips.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a VAE (and optionally a diffusion model) on validation clips.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "psnr,drmse,absrel,delta1")]
        metrics: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a directional ablation.
    Ablate {
        #[arg(long, value_enum)]
        name: AblationName,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Required for `ref-frames`.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Required for `ref-frames`.
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write ground-truth images and depth of one clip as PNG.
    RenderDebug {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn data_dir(cfg: &RunConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| cfg.dataset.clone())
}

fn load_vae(path: &Path) -> Result<(splatworld::stormvae::StormVae, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(harness::load_vae(&ck)?)
}

fn load_diffusion(path: &Path) -> Result<(DiffusionModel, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(DiffusionModel::load(&ck)?)
}

fn write_report(out: Option<&Path>, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out } => {
            let clips = synthesize(&cfg.synth)?;
            let manifest = write_dataset(&clips, &out, cfg.synth.val_fraction)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            log::info!("wrote {} clips to {}", manifest.clips.len(), out.display());
        }
        Command::TrainVae { data, out } => {
            let clips = read_split(&data_dir(&cfg, data), Split::Train)?;
            harness::train_vae(&cfg, &clips, Some(&out))?;
        }
        Command::TrainDiffusion { data, vae, out } => {
            let (vae, _) = load_vae(&vae)?;
            let clips = read_split(&data_dir(&cfg, data), Split::Train)?;
            harness::train_diffusion(&cfg, &vae, &clips, Some(&out))?;
        }
        Command::Generate { data, vae, diffusion, refs, steps, horizon, seed, out } => {
            let (vae, _) = load_vae(&vae)?;
            let (model, dcfg) = load_diffusion(&diffusion)?;
            let clips = read_split(&data_dir(&cfg, data), Split::Val)?;
            let window = dcfg.train.window_frames;
            let horizon = horizon.unwrap_or(window);
            for (i, clip) in clips.iter().enumerate() {
                let opts = SampleOptions { steps, seed: seed.wrapping_add(i as u64), guidance: dcfg.diffusion.guidance };
                let g = harness::generate(&model, &vae, clip, refs, horizon, window, opts)?;
                let dir = out.join(&clip.id);
                export_sequence(&dir, &g.images)?;
                let ck = Checkpoint { kind: "latents".into(), step: 0, config: serde_json::json!({"windows": g.windows}), tensors: vec![("latents".into(), g.latents)] };
                ck.save(&dir.join("latents.ckpt"))?;
            }
        }
        Command::Reconstruct { data, vae, window, out } => {
            let (vae, _) = load_vae(&vae)?;
            let clips = read_split(&data_dir(&cfg, data), Split::Val)?;
            let enc = DepthEncoding::for_range(vae.cfg.splat.far);
            for clip in &clips {
                let lat = vae.encode_clip_means(clip)?;
                let rec = harness::reconstruct4d(&vae, &lat, &clip.cameras, &clip.timestamps, &clip.view_valid, window)?;
                let dir = out.join(&clip.id);
                std::fs::create_dir_all(&dir)?;
                for t in 0..rec.n_frames {
                    for v in (0..rec.n_views).filter(|&v| clip.view_valid[v]) {
                        let i = t * rec.n_views + v;
                        save_rgb(&dir.join(format!("rgb_t{t:03}_v{v}.png")), &rec.rgb[i], rec.height, rec.width)?;
                        save_depth16(&dir.join(format!("depth_t{t:03}_v{v}.png")), &rec.depth[i], rec.height, rec.width, enc)?;
                    }
                }
                for (s, set) in rec.windows.iter().zip(&rec.gaussians) {
                    write_gaussians(&dir.join(format!("gaussians_w{s:03}.txt")), set, *s)?;
                }
            }
        }
        Command::Eval { data, vae, diffusion, metrics, out } => {
            let (vae_model, _) = load_vae(&vae)?;
            let clips = read_split(&data_dir(&cfg, data), Split::Val)?;
            let mut report = harness::evaluate_vae(&vae_model, &clips)?;
            let keep = |k: &str| metrics.iter().any(|m| k.contains(m.as_str()));
            report.metrics.retain(|k, _| keep(k));
            for m in report.per_clip.values_mut() {
                m.retain(|k, _| keep(k));
            }
            if metrics.iter().any(|m| m == "frechet") {
                let Some(dpath) = diffusion else { bail!("the frechet metric needs --diffusion") };
                let (model, dcfg) = load_diffusion(&dpath)?;
                let ev = harness::ablation::evaluator(&dcfg)?;
                let (image, video) = harness::ablation::evaluate_generation(&dcfg, &model, &vae_model, &ev, &clips, 3, dcfg.seed)?;
                report.metrics.insert("frechet_image".into(), image);
                report.metrics.insert("frechet_video".into(), video);
            }
            report.meta.checkpoint = vae.display().to_string();
            report.meta.split = "val".into();
            report.meta.seed = cfg.seed;
            report.config = cfg.echo();
            report.validate()?;
            write_report(out.as_deref(), &report)?;
        }
        Command::Ablate { name, data, vae, diffusion, seeds, out } => {
            let dir = data_dir(&cfg, data);
            let report = match name {
                AblationName::RefFrames => {
                    let (Some(v), Some(d)) = (vae, diffusion) else { bail!("ref-frames needs --vae and --diffusion") };
                    let (vae, _) = load_vae(&v)?;
                    let (model, dcfg) = load_diffusion(&d)?;
                    let clips = read_split(&dir, Split::Val)?;
                    harness::run_ref_frames(&dcfg, &model, &vae, &clips, &seeds, dcfg.train.diffusion_steps)?
                }
                AblationName::StormVae => {
                    let train = read_split(&dir, Split::Train)?;
                    let val = read_split(&dir, Split::Val)?;
                    harness::run_storm_vae(&cfg, &train, &val, &seeds)?
                }
            };
            std::fs::create_dir_all(&out)?;
            let mut text = report.table.clone();
            for (name, ok) in &report.verdicts {
                text.push_str(&format!("\n{name}: {}", if *ok { "yes" } else { "no" }));
            }
            std::fs::write(out.join(format!("{}.md", report.name)), &text)?;
            println!("{text}");
        }
        Command::RenderDebug { data, clip, out } => {
            let clips = read_dataset(&data_dir(&cfg, data))?;
            let Some(c) = clips.get(clip) else { bail!("clip index {clip} out of range ({} clips)", clips.len()) };
            std::fs::create_dir_all(&out)?;
            let enc = DepthEncoding::for_range(cfg.vae.splat.far);
            for t in 0..c.n_frames {
                for v in 0..c.n_views {
                    save_rgb(&out.join(format!("rgb_t{t:03}_v{v}.png")), c.image(t, v), c.height, c.width)?;
                    save_depth16(&out.join(format!("depth_t{t:03}_v{v}.png")), c.depth_map(t, v), c.height, c.width, enc)?;
                    let boxes: Vec<f32> = c.box_raster(t, v).iter().flat_map(|&b| [b, b, b]).collect();
                    save_rgb(&out.join(format!("boxes_t{t:03}_v{v}.png")), &boxes, c.height, c.width)?;
                }
            }
        }
    }
    Ok(())
}

fn main() {
    if harness::strict_mode() && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
