//! The `eventcanvas` command line.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eventcanvas::attention::AttentionMode;
use eventcanvas::eval::{evaluate, evaluate_ground_truth, EvalOptions};
use eventcanvas::model::{load_checkpoint, Model, ModelConfig};
use eventcanvas::synthgen::{make_dataset_with, make_swap_benchmark, DatasetOptions, SceneOptions};
use eventcanvas::train::{train, TrainConfig};
use eventcanvas::triplet::parse_triplet;

use crate::artifacts::{generate_video, write_video};
use crate::store::{default_data_dir, DATA_DIR_ENV};
use crate::worker::{ServiceConfig, ServiceContext};

#[derive(Debug, Parser)]
#[command(name = "eventcanvas", version, about = "Trajectory-, text- and reference-conditioned toy video generation")]
pub struct Cli {
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied to the model's cross-attention. When absent, the
/// checkpoint (or training config) value is kept.
#[derive(Debug, Clone, Copy, Default, Args)]
pub struct AttentionArgs {
    /// Cross-attention variant: weighted, full or hard.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub attention_mode: Option<AttentionMode>,
    /// Bias strength w for weighted attention (trained models default to 30).
    #[arg(long, global = true)]
    pub attention_w: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: eventcanvas::Error| e.to_string())
}

impl AttentionArgs {
    pub fn apply(&self, config: &mut ModelConfig) -> Result<()> {
        if let Some(m) = self.attention_mode {
            config.attention_mode = m;
        }
        if let Some(w) = self.attention_w {
            if !(w > 0.0 && w.is_finite()) {
                bail!("--attention-w must be a positive number");
            }
            config.attention_w = w;
        }
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Minimum foreground motion score for a clip to be kept.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write trajectory overlay frames.
        #[arg(long)]
        overlay: bool,
        /// Write two-agent crossing cases instead of random scenes.
        #[arg(long)]
        swap: bool,
    },
    /// Train from a JSON training config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one video from a triplet and a first frame.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Triplet JSON; reference images resolve relative to its folder.
        #[arg(long)]
        triplet: PathBuf,
        #[arg(long)]
        first_frame: PathBuf,
        #[arg(long, default_value_t = crate::store::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a benchmark directory.
    Eval {
        /// Omit together with `--ground-truth` to score the stored videos.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::store::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score the benchmark's own videos instead of generating.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Store root; defaults to $CANVAS_DATA_DIR, then ./canvas-data.
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

/// Loads a checkpoint and applies attention overrides.
pub fn load_model(path: &Path, attention: &AttentionArgs) -> Result<Model> {
    let mut model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    attention.apply(&mut model.config)?;
    Ok(model)
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).with_context(|| format!("reading {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let attn = cli.attention;
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            threshold,
            overlay,
            swap,
        } => {
            let manifest = if swap {
                make_swap_benchmark(n, seed, &SceneOptions::default(), &out)?
            } else {
                let mut opts = DatasetOptions::new(n, seed);
                opts.overlay = overlay;
                if let Some(t) = threshold {
                    opts.threshold = t;
                }
                make_dataset_with(&opts, &out)?
            };
            println!("wrote {} clips to {}", manifest.clips.len(), out.display());
        }
        Command::Train { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: TrainConfig = serde_json::from_str(&text).context("parsing training config")?;
            if let Some(dir) = out {
                cfg.out_dir = Some(dir);
            }
            if cfg.out_dir.is_none() {
                bail!("no output directory: set out_dir in the config or pass --out");
            }
            if let Some(m) = attn.attention_mode {
                cfg.attention_mode = m;
            }
            if let Some(w) = attn.attention_w {
                cfg.attention_w = w;
            }
            let every = (cfg.steps / 20).max(1);
            let outcome = train(&cfg, &mut |r| {
                if r.step % every == 0 || r.step == 1 {
                    tracing::info!(step = r.step, lr = r.lr, loss = r.loss, "train");
                }
            })?;
            let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss);
            let dir = cfg.out_dir.as_ref().expect("checked above");
            println!("trained {} steps, final loss {last:.5}; wrote {}", outcome.curve.len(), dir.join("model.ckpt").display());
        }
        Command::Generate {
            checkpoint,
            triplet,
            first_frame,
            steps,
            seed,
            out,
        } => {
            let model = load_model(&checkpoint, &attn)?;
            let t = parse_triplet(&std::fs::read(&triplet).with_context(|| format!("reading {}", triplet.display()))?)?;
            let first = read_png(&first_frame)?.to_rgb8();
            let base = triplet.parent().unwrap_or(Path::new("."));
            let mut refs = HashMap::new();
            for r in &t.references {
                refs.insert(r.image_ref.clone(), read_png(&base.join(&r.image_ref))?.to_rgba8());
            }
            let video = generate_video(&model, &t, &first, &refs, steps, seed, &mut |_, _| {})?;
            write_video(&out, &video)?;
            println!("wrote {} frames to {}", video.frames.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            benchmark,
            out,
            steps,
            seed,
            ground_truth,
        } => {
            let report = if ground_truth {
                let stride = match &checkpoint {
                    Some(p) => load_model(p, &attn)?.grid().spatial_stride,
                    None => eventcanvas::condition::LatentGrid::desk_default().spatial_stride,
                };
                evaluate_ground_truth(&benchmark, stride)?
            } else {
                let Some(path) = checkpoint else { bail!("--checkpoint is required unless --ground-truth is set") };
                let model = load_model(&path, &attn)?;
                evaluate(&model, &benchmark, &EvalOptions { steps, seed, max_cases: 0 })?
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, report.to_json())?;
            let a = &report.aggregate;
            let show = |v: Option<f64>| v.map_or("undefined".to_owned(), |x| format!("{x:.4}"));
            println!(
                "{} cases: objmc {} appearance_rate {} subject {} background {}",
                report.cases.len(),
                show(a.objmc),
                show(a.appearance_rate),
                show(a.subject_consistency),
                show(a.background_consistency)
            );
        }
        Command::Serve {
            port,
            host,
            checkpoint,
            data_dir,
            workers,
        } => {
            let model = match &checkpoint {
                Some(p) => load_model(p, &attn)?,
                None => {
                    tracing::warn!("no --checkpoint given; serving an untrained model");
                    let mut cfg = ModelConfig::desk_default();
                    attn.apply(&mut cfg)?;
                    Model::new(cfg, 0)?
                }
            };
            let mut config = ServiceConfig::new(data_dir.unwrap_or_else(default_data_dir));
            config.workers = workers.max(1);
            let ctx = Arc::new(ServiceContext::open(config, model)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(ctx, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
