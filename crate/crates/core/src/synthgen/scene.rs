//! Random scene sampling.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Background, Motion, PaletteColor, Path, SceneObject, SceneSpec, Shape, SpeedProfile, DEFAULT_CAPTION_TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub frame_size: (u32, u32),
    pub num_frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Chance that an object enters or leaves the frame.
    pub entry_exit_prob: f64,
    pub keypoints: usize,
    pub background_points: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            frame_size: (64, 64),
            num_frames: 16,
            min_objects: 1,
            max_objects: 3,
            min_size: 10,
            max_size: 16,
            entry_exit_prob: 0.35,
            keypoints: 1,
            background_points: 2,
        }
    }
}

fn dim_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random_range(10..=70), rng.random_range(10..=70), rng.random_range(10..=70)]
}

fn inside(p: [f64; 2], margin: f64, w: f64, h: f64) -> bool {
    p[0] >= margin && p[1] >= margin && p[0] <= w - margin && p[1] <= h - margin
}

fn random_inside(rng: &mut impl Rng, margin: f64, w: f64, h: f64) -> [f64; 2] {
    [rng.random_range(margin..w - margin), rng.random_range(margin..h - margin)]
}

/// A point just outside one frame edge, far enough that the object is
/// not drawn there.
fn random_outside(rng: &mut impl Rng, size: f64, w: f64, h: f64) -> [f64; 2] {
    let off = size / 2.0 + rng.random_range(2.0..8.0);
    match rng.random_range(0..4) {
        0 => [-off, rng.random_range(size..h - size)],
        1 => [w + off, rng.random_range(size..h - size)],
        2 => [rng.random_range(size..w - size), -off],
        _ => [rng.random_range(size..w - size), h + off],
    }
}

fn bend(rng: &mut impl Rng, from: [f64; 2], to: [f64; 2]) -> Path {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let len = dx.hypot(dy).max(1e-6);
    let (nx, ny) = (-dy / len, dx / len);
    let a = rng.random_range(-0.4..0.4) * len;
    let b = rng.random_range(-0.4..0.4) * len;
    Path::Bezier {
        p: [
            from,
            [from[0] + dx / 3.0 + nx * a, from[1] + dy / 3.0 + ny * a],
            [from[0] + 2.0 * dx / 3.0 + nx * b, from[1] + 2.0 * dy / 3.0 + ny * b],
            to,
        ],
    }
}

fn random_path(rng: &mut impl Rng, size: f64, opts: &SceneOptions, edge_event: Option<bool>) -> Path {
    let (w, h) = (opts.frame_size.0 as f64, opts.frame_size.1 as f64);
    let margin = size / 2.0 + 1.0;
    let curved = rng.random_bool(0.4);
    if let Some(entering) = edge_event {
        let out = random_outside(rng, size, w, h);
        let inn = random_inside(rng, margin + 4.0, w, h);
        let (from, to) = if entering { (out, inn) } else { (inn, out) };
        return if curved { bend(rng, from, to) } else { Path::Line { from, to } };
    }
    for _ in 0..100 {
        let from = random_inside(rng, margin, w, h);
        if curved && rng.random_bool(0.5) {
            let radius = rng.random_range(8.0..20.0);
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let sweep = rng.random_range(0.8..1.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let center = [from[0] - radius * start.cos(), from[1] - radius * start.sin()];
            let path = Path::Arc { center, radius, start, end: start + sweep };
            if (0..=10).all(|i| inside(path.at(i as f64 / 10.0), margin, w, h)) {
                return path;
            }
            continue;
        }
        let len = rng.random_range(14.0..38.0);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let to = [from[0] + len * ang.cos(), from[1] + len * ang.sin()];
        if !inside(to, margin, w, h) {
            continue;
        }
        let path = if curved { bend(rng, from, to) } else { Path::Line { from, to } };
        if (0..=10).all(|i| inside(path.at(i as f64 / 10.0), margin, w, h)) {
            return path;
        }
    }
    let c = [w / 2.0, h / 2.0];
    Path::Line { from: [c[0] - 10.0, c[1]], to: [c[0] + 10.0, c[1]] }
}

/// Samples a scene. Callers derive `rng` per clip so clips are
/// independent of generation order.
pub fn random_scene(rng: &mut impl Rng, opts: &SceneOptions, seed: u64) -> SceneSpec {
    let t = opts.num_frames;
    let background = if rng.random_bool(0.5) {
        Background::Solid { color: dim_color(rng) }
    } else {
        Background::Checker {
            a: dim_color(rng),
            b: dim_color(rng),
            cell: if rng.random_bool(0.5) { 8 } else { 16 },
        }
    };
    let n = rng.random_range(opts.min_objects..=opts.max_objects.max(opts.min_objects));
    let mut colors = PaletteColor::ALL.to_vec();
    colors.shuffle(rng);
    let objects = colors
        .into_iter()
        .take(n)
        .map(|color| {
            let size = rng.random_range(opts.min_size..=opts.max_size);
            let edge_event = rng.random_bool(opts.entry_exit_prob).then(|| rng.random_bool(0.5));
            let path = random_path(rng, size as f64, opts, edge_event);
            let speed = *[SpeedProfile::Constant, SpeedProfile::Constant, SpeedProfile::EaseIn, SpeedProfile::EaseOut, SpeedProfile::EaseInOut]
                .choose(rng)
                .unwrap();
            let (start_frame, end_frame) = if edge_event.is_some() || rng.random_bool(0.75) {
                (0, t - 1)
            } else {
                let s = rng.random_range(0..=t / 4);
                (s, rng.random_range((s + t / 2).min(t - 1)..t))
            };
            SceneObject {
                shape: Shape::ALL[rng.random_range(0..3)],
                color,
                size,
                motion: Motion { path, speed, start_frame, end_frame },
                keypoints: opts.keypoints,
                caption_template: DEFAULT_CAPTION_TEMPLATE.into(),
            }
        })
        .collect();
    SceneSpec {
        frame_size: opts.frame_size,
        num_frames: t,
        objects,
        background,
        background_points: opts.background_points,
        seed,
    }
}

/// Two objects entering from opposite side edges and crossing the frame,
/// one in the upper half and one in the lower half. Which track comes from
/// which side is random. Neither is visible in frame 0, so their colours
/// can only come from the captions.
pub fn swap_scene(rng: &mut impl Rng, opts: &SceneOptions, seed: u64) -> SceneSpec {
    let (w, h) = (opts.frame_size.0 as f64, opts.frame_size.1 as f64);
    let t = opts.num_frames;
    let mut colors = PaletteColor::ALL.to_vec();
    colors.shuffle(rng);
    let upper_first = rng.random_bool(0.5);
    let left_first = rng.random_bool(0.5);
    let objects = (0..2)
        .map(|i| {
            let size = rng.random_range(opts.min_size..=opts.max_size);
            let half = size as f64 / 2.0;
            let off = half + rng.random_range(2.0..4.0);
            let upper = (i == 0) == upper_first;
            let band = if upper { (half + 2.0, h / 2.0 - 4.0) } else { (h / 2.0 + 4.0, h - half - 2.0) };
            let y0 = rng.random_range(band.0..band.1);
            let y1 = rng.random_range(band.0..band.1);
            let x_end = rng.random_range(half + 4.0..w / 3.0);
            let from_left = (i == 0) == left_first;
            let (from, to) = if from_left { ([-off, y0], [w - x_end, y1]) } else { ([w + off, y0], [x_end, y1]) };
            SceneObject {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: colors[i],
                size,
                motion: Motion {
                    path: Path::Line { from, to },
                    speed: SpeedProfile::Constant,
                    start_frame: 0,
                    end_frame: t - 1,
                },
                keypoints: 1,
                caption_template: DEFAULT_CAPTION_TEMPLATE.into(),
            }
        })
        .collect();
    SceneSpec {
        frame_size: opts.frame_size,
        num_frames: t,
        objects,
        background: Background::Solid { color: dim_color(rng) },
        background_points: opts.background_points,
        seed,
    }
}
