//! Flow-matching training over a dataset directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use image::{RgbImage, RgbaImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, DEFAULT_W};
use crate::condition::{encode_video, Latent, LatentGrid, DEFAULT_HEATMAP_SIGMA, LATENT_CHANNELS};
use crate::error::{ensure_arg, Error, Result};
use crate::model::{fm_interpolate, fm_loss, fm_loss_grad, gaussian_latent_from, save_checkpoint, Conditioning, LossMode, Model, ModelConfig, ModelParams};
use crate::triplet::MultimodalTriplet;
use crate::synthgen::{caption_vocabulary, load_dataset};

/// Network size; the grid comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub spatial_stride: u32,
    pub temporal_stride: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            text_dim: 64,
            spatial_stride: 8,
            temporal_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Where `model.ckpt` and `loss.csv` go, if set.
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub attention_w: f64,
    pub loss_mode: LossMode,
    pub architecture: Architecture,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Limit on clips read from the dataset; 0 reads all.
    pub max_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            out_dir: None,
            batch_size: 8,
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            seed: 0,
            attention_mode: AttentionMode::Weighted,
            attention_w: DEFAULT_W,
            loss_mode: LossMode::Mse,
            architecture: Architecture::default(),
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_clips: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.steps >= 1, "steps must be >= 1");
        ensure_arg!(self.batch_size >= 1, "batch size must be >= 1");
        ensure_arg!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning rate must be >= 0");
        ensure_arg!(self.attention_w > 0.0, "attention w must be positive");
        ensure_arg!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        Ok(())
    }

    /// Learning rate of 1-based step `step`: linear ramp over the warmup,
    /// constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// One training example with everything but the noise precomputed.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub clip_id: String,
    pub x1: Latent,
    pub cond: Conditioning,
}

/// Encodes every clip of a dataset for `model`.
pub fn load_examples(model: &Model, dataset: &std::path::Path, max_clips: usize) -> Result<Vec<TrainingExample>> {
    let ds = load_dataset(dataset)?;
    let n = if max_clips == 0 { ds.len() } else { ds.len().min(max_clips) };
    (0..n)
        .map(|i| {
            let clip = ds.load_clip(i)?;
            example_from_clip(model, &clip.clip_id, &clip.frames, &clip.triplet, &clip.references)
        })
        .collect()
}

pub fn example_from_clip(
    model: &Model,
    clip_id: &str,
    frames: &[RgbImage],
    triplet: &MultimodalTriplet,
    references: &HashMap<String, RgbaImage>,
) -> Result<TrainingExample> {
    let grid = model.grid();
    let x1 = encode_video(frames, grid)?;
    let noise = Latent::for_grid(grid, model.config.latent_channels);
    let cond = model.condition(triplet, &frames[0], noise, references)?;
    Ok(TrainingExample {
        clip_id: clip_id.to_owned(),
        x1,
        cond,
    })
}

/// Model config matching a dataset's clip geometry.
pub fn model_config_for(config: &TrainConfig, frame_size: (u32, u32), num_frames: usize) -> Result<ModelConfig> {
    let a = &config.architecture;
    let mc = ModelConfig {
        grid: LatentGrid::new(frame_size, num_frames, a.spatial_stride, a.temporal_stride)?,
        latent_channels: LATENT_CHANNELS,
        dim: a.dim,
        depth: a.depth,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        text_dim: a.text_dim,
        vocab: caption_vocabulary(),
        attention_mode: config.attention_mode,
        attention_w: config.attention_w,
        heatmap_sigma: DEFAULT_HEATMAP_SIGMA,
    };
    mc.validate()?;
    Ok(mc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` rows with a header.
pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in curve {
        let _ = writeln!(s, "{},{:e},{:.9e}", r.step, r.lr, r.loss);
    }
    s
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let groups = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in groups {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Zeroes latent frame 0, which the sampler pins to the image latent.
fn mask_first_frame(l: &mut Latent) {
    l.frame_mut(0).iter_mut().for_each(|v| *v = 0.0);
}

/// Drives optimization over in-memory examples.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    examples: Vec<TrainingExample>,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
    pub curve: Vec<LossRecord>,
}

impl Trainer {
    /// `model` is the initial state; `examples` must come from its grid.
    pub fn new(config: TrainConfig, model: Model, examples: Vec<TrainingExample>) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::Dataset("no training examples".into()));
        }
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let order = (0..examples.len()).collect();
        Ok(Self {
            config,
            model,
            examples,
            adam,
            rng,
            order,
            cursor: usize::MAX,
            step: 0,
            curve: Vec::new(),
        })
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimizer update on a fresh batch; returns the mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let lr = self.config.lr_at(step);
        let mut grads = self.model.params.zeros_like();
        let mut total = 0.0;
        let b = self.config.batch_size;
        for _ in 0..b {
            let idx = self.next_index();
            let ex = &self.examples[idx];
            let cfg = &self.model.config;
            let x0 = gaussian_latent_from(&cfg.grid, cfg.latent_channels, &mut self.rng);
            let t: f64 = self.rng.random_range(0.0..1.0);
            let mut sample = fm_interpolate(&x0, &ex.x1, t)?;
            // The conditioning frame is given, never generated.
            sample.x_t.frame_mut(0).copy_from_slice(ex.x1.frame(0));
            let (mut pred, cache) = self.model.forward_cached(&sample.x_t, t, &ex.cond)?;
            let mut target = sample.v_t;
            mask_first_frame(&mut pred);
            mask_first_frame(&mut target);
            let loss = fm_loss(&pred, &target, self.config.loss_mode)?;
            let mut d = fm_loss_grad(&pred, &target, self.config.loss_mode);
            mask_first_frame(&mut d);
            d.data.iter_mut().for_each(|v| *v /= b as f64);
            self.model.backward(&cache, &d, &ex.cond, &mut grads);
            total += loss;
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if self.config.grad_clip > 0.0 {
            let norm = grads.sq_norm().sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                for (_, m) in grads.tensors_mut() {
                    m.data.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.adam.step(&mut self.model.params, &grads, lr, &self.config);
        self.step = step;
        self.curve.push(LossRecord { step, lr, loss });
        Ok(loss)
    }

    /// Runs the remaining steps, reporting each record.
    pub fn run(&mut self, on_step: &mut dyn FnMut(&LossRecord)) -> Result<()> {
        while self.step < self.config.steps {
            self.train_step()?;
            on_step(self.curve.last().unwrap());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossRecord>,
}

/// Loads the dataset, trains and, when `out_dir` is set, writes
/// `model.ckpt` and `loss.csv` there.
pub fn train(config: &TrainConfig, on_step: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = load_dataset(&config.dataset)?;
    let first = &ds.manifest.clips[0];
    let mc = model_config_for(config, (first.frame_size[0], first.frame_size[1]), first.num_frames)?;
    let model = Model::new(mc, config.seed)?;
    let examples = load_examples(&model, &config.dataset, config.max_clips)?;
    let mut trainer = Trainer::new(config.clone(), model, examples)?;
    trainer.run(on_step)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&trainer.model, &dir.join("model.ckpt"))?;
        std::fs::write(dir.join("loss.csv"), loss_csv(&trainer.curve))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        curve: trainer.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 10,
            ..Default::default()
        };
        assert_eq!(c.lr_at(5), 5e-4);
        assert_eq!(c.lr_at(10), 1e-3);
        assert_eq!(c.lr_at(500), 1e-3);
        let none = TrainConfig {
            warmup_steps: 0,
            ..c
        };
        assert_eq!(none.lr_at(1), 1e-3);
    }

    #[test]
    fn csv_format() {
        let s = loss_csv(&[LossRecord { step: 1, lr: 0.5, loss: 2.0 }]);
        assert_eq!(s, "step,lr,loss\n1,5e-1,2.000000000e0\n");
    }
}
