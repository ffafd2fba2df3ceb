//! Helpers shared by integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use eventcanvas::attention::AttentionMode;
use eventcanvas::condition::{LatentGrid, LATENT_CHANNELS};
use eventcanvas::model::{fm_interpolate, fm_loss, gaussian_latent, LossMode, Model, ModelConfig};
use eventcanvas::synthgen::caption_vocabulary;
use eventcanvas::triplet::{BBox, Caption, MultimodalTriplet, Point, TrajectoryTrack};
use image::{Rgb, RgbImage, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        grid: LatentGrid::new((32, 32), 5, 8, 4).unwrap(),
        latent_channels: LATENT_CHANNELS,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        text_dim: 8,
        vocab: caption_vocabulary(),
        attention_mode: mode,
        attention_w: 30.0,
        heatmap_sigma: 1.5,
    }
}

pub fn triplet() -> MultimodalTriplet {
    let mut tr = MultimodalTriplet::new((32, 32), 5);
    let a: Vec<Point> = (0..5).map(|f| Point::new(4.0 + 5.0 * f as f32, 8.0)).collect();
    let b: Vec<Point> = (0..5).map(|f| Point::new(26.0, 4.0 + 5.0 * f as f32)).collect();
    tr.push_foreground(TrajectoryTrack::new("a", a, vec![true; 5]), BBox::new(4.0, 8.0, 8.0, 8.0), Caption::new("the red square moves right", "red square"));
    tr.push_foreground(TrajectoryTrack::new("b", b, vec![true, true, false, true, true]), BBox::new(26.0, 4.0, 6.0, 6.0), Caption::new("the blue circle moves down", "blue circle"));
    tr
}

/// A smooth gradient image for the first frame.
pub fn frame() -> RgbImage {
    RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, 90]))
}

/// Largest relative error over every entry of every parameter tensor,
/// with the first entry that exceeds `tolerance`, if any.
pub fn gradient_check(mode: AttentionMode, tolerance: f64) -> (f64, Option<String>) {
    let mut model = Model::new(tiny(mode), 1).unwrap();
    // Move away from the zero-gated initial point so every branch carries
    // gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (_, m) in model.params.tensors_mut() {
        m.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let frame = frame();
    let assets: HashMap<String, RgbaImage> = HashMap::new();
    let x0 = gaussian_latent(&model.config.grid, LATENT_CHANNELS, 3);
    let x1 = gaussian_latent(&model.config.grid, LATENT_CHANNELS, 4);
    let sample = fm_interpolate(&x0, &x1, 0.37).unwrap();
    let cond = model.condition(&triplet(), &frame, x0.clone(), &assets).unwrap();

    let mut grads = model.params.zeros_like();
    model.loss_and_grad(&sample, &cond, LossMode::Mse, &mut grads).unwrap();

    let loss = |m: &Model| fm_loss(&m.forward(&sample.x_t, sample.t, &cond).unwrap(), &sample.v_t, LossMode::Mse).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, m)| (n, m.data.clone())).collect();
    let mut worst = 0.0f64;
    let mut first_bad = None;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = model.params.tensors()[ti].1.data[i];
            let mut central = |h: f64| {
                model.params.tensors_mut()[ti].1.data[i] = orig + h;
                let up = loss(&model);
                model.params.tensors_mut()[ti].1.data[i] = orig - h;
                let down = loss(&model);
                model.params.tensors_mut()[ti].1.data[i] = orig;
                (up - down) / (2.0 * h)
            };
            // Richardson extrapolation cancels the O(h^2) truncation term.
            let (coarse, fine) = (central(1e-3), central(5e-4));
            let numeric = (4.0 * fine - coarse) / 3.0;
            // Gradients below 1e-6 are compared on an absolute scale.
            let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
            if rel >= tolerance && first_bad.is_none() {
                first_bad = Some(format!("{name}[{i}]: analytic {} numeric {numeric}", g[i]));
            }
        }
    }
    (worst, first_bad)
}
