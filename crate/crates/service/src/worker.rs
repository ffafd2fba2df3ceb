//! Shared service state and the generation workers.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use eventcanvas::model::Model;
use eventcanvas::synthgen::Background;
use eventcanvas::triplet::{parse_triplet, MultimodalTriplet};
use image::{ImageFormat, RgbImage, RgbaImage};

use crate::artifacts::generate_video;
use crate::store::{AssetStore, GenerateRequest, GenerationJob, JobStore};

/// Background used when a request names neither a first frame nor a preset.
pub const DEFAULT_PRESET: Background = Background::Solid { color: [24, 24, 32] };

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub max_asset_bytes: usize,
    /// Upper bound on sampler steps per request.
    pub max_steps: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            workers: 1,
            max_asset_bytes: crate::store::DEFAULT_MAX_ASSET_BYTES,
            max_steps: 1000,
        }
    }
}

/// Everything handlers and workers share.
#[derive(Debug)]
pub struct ServiceContext {
    pub config: ServiceConfig,
    pub model: Arc<Model>,
    pub jobs: JobStore,
    pub assets: AssetStore,
}

impl ServiceContext {
    pub fn open(config: ServiceConfig, model: Model) -> Result<Self> {
        let jobs = JobStore::open(config.data_dir.join("jobs.json"))?;
        let assets = AssetStore::open(config.data_dir.join("assets"), config.max_asset_bytes)?;
        Ok(Self {
            config,
            model: Arc::new(model),
            jobs,
            assets,
        })
    }

    fn load_png(&self, id: &str) -> Result<image::DynamicImage> {
        let bytes = self.assets.get(id).ok_or_else(|| anyhow!("missing asset {id}"))?;
        Ok(image::load_from_memory_with_format(&bytes, ImageFormat::Png)?)
    }

    /// Resolves a request into sampler inputs.
    pub fn inputs(&self, request: &GenerateRequest) -> Result<(MultimodalTriplet, RgbImage, HashMap<String, RgbaImage>)> {
        let triplet = parse_triplet(&serde_json::to_vec(&request.triplet)?)?;
        let (w, h) = triplet.frame_size;
        let first = match (&request.first_frame, &request.scene_preset) {
            (Some(id), _) => self.load_png(id)?.to_rgb8(),
            (None, Some(bg)) => bg.render(w, h),
            (None, None) => DEFAULT_PRESET.render(w, h),
        };
        let mut refs = HashMap::new();
        for r in &triplet.references {
            refs.insert(r.image_ref.clone(), self.load_png(&r.image_ref)?.to_rgba8());
        }
        Ok((triplet, first, refs))
    }

    /// Runs one claimed job to a terminal state.
    pub fn execute(&self, job: &GenerationJob) -> Result<()> {
        let outcome = self.run_job(job);
        let stored = match outcome {
            Ok(refs) => self.jobs.finish(&job.job_id, Ok(refs)),
            Err(e) => {
                tracing::warn!(job = %job.job_id, error = %format!("{e:#}"), "generation failed");
                self.jobs.finish(&job.job_id, Err(format!("{e:#}")))
            }
        };
        stored.context("recording job outcome")
    }

    fn run_job(&self, job: &GenerationJob) -> Result<(String, String)> {
        let (triplet, first, refs) = self.inputs(&job.request)?;
        let mut last = 0.0;
        let video = generate_video(&self.model, &triplet, &first, &refs, job.request.steps, job.request.seed, &mut |done, total| {
            let p = done as f64 / total as f64;
            // Keep store writes bounded for long samplers.
            if p - last >= 0.05 || done == total {
                last = p;
                let _ = self.jobs.set_progress(&job.job_id, p);
            }
        })?;
        let result = self.assets.put_blob(&video.archive)?;
        let preview = self.assets.put_blob(&video.preview)?;
        Ok((result, preview))
    }
}

/// Generation threads pulling from the job queue.
pub struct WorkerPool {
    handles: Vec<JoinHandle<()>>,
    shutdown: Arc<AtomicBool>,
    ctx: Arc<ServiceContext>,
}

impl WorkerPool {
    pub fn spawn(ctx: Arc<ServiceContext>) -> Self {
        let shutdown = Arc::new(AtomicBool::new(false));
        let handles = (0..ctx.config.workers.max(1))
            .map(|i| {
                let ctx = Arc::clone(&ctx);
                let stop = Arc::clone(&shutdown);
                std::thread::Builder::new()
                    .name(format!("generate-{i}"))
                    .spawn(move || {
                        while !stop.load(Ordering::SeqCst) {
                            match ctx.jobs.claim_next(&stop, Duration::from_millis(200)) {
                                Ok(Some(job)) => {
                                    tracing::info!(job = %job.job_id, "generation started");
                                    if let Err(e) = ctx.execute(&job) {
                                        tracing::error!(job = %job.job_id, error = %format!("{e:#}"), "job store error");
                                    }
                                }
                                Ok(None) => {}
                                Err(e) => {
                                    tracing::error!(error = %e, "cannot claim job");
                                    std::thread::sleep(Duration::from_millis(500));
                                }
                            }
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self { handles, shutdown, ctx }
    }

    /// Stops after the jobs in flight finish.
    pub fn shutdown(self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.ctx.jobs.wake_all();
        for h in self.handles {
            let _ = h.join();
        }
    }
}
