//! Euler integration of the learned velocity field.

use image::RgbImage;

use super::{gaussian_latent, Model};
use crate::condition::{decode_video, AssetSource, Latent};
use crate::error::{ensure_arg, Result};
use crate::triplet::MultimodalTriplet;

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Latent,
    pub frames: Vec<RgbImage>,
}

/// Integrates `dx/dt = forward(x, t)` from seeded noise at `t = 0` to
/// `t = 1` in `steps` uniform steps. Latent frame 0 is reset to the image
/// latent after every step. `progress` receives `(done, total)`.
pub fn sample(
    model: &Model,
    triplet: &MultimodalTriplet,
    first_frame: &RgbImage,
    assets: &dyn AssetSource,
    steps: usize,
    seed: u64,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<SampleOutput> {
    ensure_arg!(steps >= 1, "steps must be >= 1");
    let cfg = &model.config;
    let x0 = gaussian_latent(&cfg.grid, cfg.latent_channels, seed);
    let cond = model.condition(triplet, first_frame, x0.clone(), assets)?;
    let mut x = x0;
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let v = model.forward(&x, i as f64 * dt, &cond)?;
        for (xv, vv) in x.data.iter_mut().zip(&v.data) {
            *xv += dt * vv;
        }
        x.frame_mut(0).copy_from_slice(cond.bundle.image_latent.frame(0));
        progress(i + 1, steps);
    }
    let frames = decode_video(&x, &cfg.grid);
    Ok(SampleOutput { latent: x, frames })
}
