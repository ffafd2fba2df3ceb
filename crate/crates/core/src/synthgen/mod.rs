//! Procedural multi-object clips with exact ground-truth tracks.
//!
//! Objects are flat-coloured shapes from a fixed palette moving over a dim
//! background. Centres snap to the integer pixel lattice before drawing, so
//! every object covers the same pixel pattern wherever it is and its mask
//! centroid is known exactly. An object is drawn only while its centre lies
//! inside the frame; that makes "visible" mean the same thing for the
//! stored tracks and for a colour-matching tracker.

mod augment;
mod dataset;
mod scene;

pub use augment::{crop_augment, extract_reference, render_trajectory_overlay, Affine, CropRect};
pub use dataset::{load_dataset, make_dataset, make_dataset_with, make_swap_benchmark, ClipEntry, Dataset, DatasetOptions, LoadedClip, Manifest, MANIFEST_VERSION};
pub use scene::{random_scene, swap_scene, SceneOptions};

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::text::Vocabulary;
use crate::triplet::{validate_triplet, BBox, Caption, MultimodalTriplet, Point, TrajectoryTrack};

/// Objects with fewer on-screen pixels than this count as not visible.
pub const MIN_VISIBLE_PIXELS: usize = 6;

/// Default clip filter threshold, in pixels of average cumulative motion.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Saturated object colours. Every pair differs by at least 127 in some
/// channel, and all of them are far from the dim background range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
    Orange,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 8] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Magenta,
        PaletteColor::Cyan,
        PaletteColor::White,
        PaletteColor::Orange,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PaletteColor::Red => [255, 0, 0],
            PaletteColor::Green => [0, 255, 0],
            PaletteColor::Blue => [0, 0, 255],
            PaletteColor::Yellow => [255, 255, 0],
            PaletteColor::Magenta => [255, 0, 255],
            PaletteColor::Cyan => [0, 255, 255],
            PaletteColor::White => [255, 255, 255],
            PaletteColor::Orange => [255, 128, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Magenta => "magenta",
            PaletteColor::Cyan => "cyan",
            PaletteColor::White => "white",
            PaletteColor::Orange => "orange",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// First palette colour named in `text`, if any.
    pub fn find_in(text: &str) -> Option<Self> {
        text.split(|c: char| !c.is_alphanumeric())
            .find_map(|w| Self::from_name(&w.to_lowercase()))
    }
}

/// Background channels stay at or below this value.
pub const BACKGROUND_MAX: u8 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Solid { color: [u8; 3] },
    Checker { a: [u8; 3], b: [u8; 3], cell: u32 },
}

impl Background {
    fn color_at(&self, x: u32, y: u32) -> [u8; 3] {
        match *self {
            Background::Solid { color } => color,
            Background::Checker { a, b, cell } => {
                if ((x / cell) + (y / cell)).is_multiple_of(2) {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// A frame filled with this background.
    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        RgbImage::from_fn(width, height, |x, y| Rgb(self.color_at(x, y)))
    }

    fn is_dim(&self) -> bool {
        let dim = |c: [u8; 3]| c.iter().all(|&v| v <= BACKGROUND_MAX);
        match *self {
            Background::Solid { color } => dim(color),
            Background::Checker { a, b, cell } => dim(a) && dim(b) && cell > 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Path {
    Line { from: [f64; 2], to: [f64; 2] },
    /// Angles in radians, `y` pointing down.
    Arc { center: [f64; 2], radius: f64, start: f64, end: f64 },
    /// Cubic Bezier with control points `p[0..4]`.
    Bezier { p: [[f64; 2]; 4] },
}

impl Path {
    pub fn at(&self, s: f64) -> [f64; 2] {
        match *self {
            Path::Line { from, to } => [from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])],
            Path::Arc { center, radius, start, end } => {
                let a = start + s * (end - start);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Path::Bezier { p } => {
                let u = 1.0 - s;
                let w = [u * u * u, 3.0 * u * u * s, 3.0 * u * s * s, s * s * s];
                let mut out = [0.0; 2];
                for (wi, pi) in w.iter().zip(&p) {
                    out[0] += wi * pi[0];
                    out[1] += wi * pi[1];
                }
                out
            }
        }
    }

    pub fn is_curved(&self) -> bool {
        !matches!(self, Path::Line { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedProfile {
    #[default]
    Constant,
    EaseIn,
    EaseOut,
    EaseInOut,
}

impl SpeedProfile {
    /// Maps normalized time to normalized path parameter.
    pub fn apply(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            SpeedProfile::Constant => u,
            SpeedProfile::EaseIn => u * u,
            SpeedProfile::EaseOut => 1.0 - (1.0 - u) * (1.0 - u),
            SpeedProfile::EaseInOut => u * u * (3.0 - 2.0 * u),
        }
    }
}

/// A path traversed between `start_frame` and `end_frame`; the object rests
/// at the path ends outside that window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub path: Path,
    pub speed: SpeedProfile,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Motion {
    pub fn position(&self, frame: usize) -> [f64; 2] {
        let span = self.end_frame.saturating_sub(self.start_frame).max(1) as f64;
        let u = (frame as f64 - self.start_frame as f64) / span;
        self.path.at(self.speed.apply(u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: PaletteColor,
    /// Diameter, side length or triangle side in pixels.
    pub size: u32,
    pub motion: Motion,
    /// Keypoints tracked on the object mask, 1 to 3.
    pub keypoints: usize,
    /// Caption template; `{color}`, `{shape}` and `{motion}` are filled in.
    pub caption_template: String,
}

pub const DEFAULT_CAPTION_TEMPLATE: &str = "the {color} {shape} {motion}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_size: (u32, u32),
    pub num_frames: usize,
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub background_points: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.frame_size;
        ensure_arg!(w > 0 && h > 0, "empty frame size");
        ensure_arg!(self.num_frames >= 2, "need at least 2 frames");
        ensure_arg!((1..=6).contains(&self.objects.len()), "scene needs 1 to 6 objects, got {}", self.objects.len());
        ensure_arg!(self.background.is_dim(), "background channels must stay at or below {BACKGROUND_MAX}");
        let colors: BTreeSet<_> = self.objects.iter().map(|o| o.color).collect();
        ensure_arg!(colors.len() == self.objects.len(), "object colours must be pairwise distinct");
        for o in &self.objects {
            ensure_arg!((1..=3).contains(&o.keypoints), "keypoints per object must be 1 to 3");
            if o.size < 4 || o.size >= w.min(h) {
                return Err(Error::InvalidArgument(format!("object size {} does not fit a {w}x{h} frame", o.size)));
            }
            ensure_arg!(o.motion.start_frame <= o.motion.end_frame, "motion window is reversed");
        }
        Ok(())
    }
}

/// A rendered clip and its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: Vec<RgbImage>,
    pub triplet: MultimodalTriplet,
    /// One track per object: the drawn mask centroid and its visibility.
    pub ground_truth: Vec<TrajectoryTrack>,
    pub motion_score: f64,
}

/// Pixel offsets covered by a shape centred on a lattice point. Pixel
/// `(i, j)` is inside when its centre `(i + 0.5, j + 0.5)` is.
pub fn shape_mask(shape: Shape, size: u32) -> Vec<(i32, i32)> {
    let r = size as f64 / 2.0;
    let reach = size as i32;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (x, y) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let inside = match shape {
                Shape::Circle => x * x + y * y <= r * r,
                Shape::Square => x.abs() <= r && y.abs() <= r,
                Shape::Triangle => {
                    // Upward equilateral triangle with its centroid at 0.
                    let h = size as f64 * 3f64.sqrt() / 2.0;
                    let (top, bottom) = (-2.0 * h / 3.0, h / 3.0);
                    y >= top && y <= bottom && x.abs() <= r * (y - top) / h
                }
            };
            if inside {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Centroid of the pixel centres of a mask, relative to the lattice point.
pub fn mask_centroid(mask: &[(i32, i32)]) -> [f64; 2] {
    let n = mask.len().max(1) as f64;
    let sx: f64 = mask.iter().map(|&(x, _)| x as f64 + 0.5).sum();
    let sy: f64 = mask.iter().map(|&(_, y)| y as f64 + 0.5).sum();
    [sx / n, sy / n]
}

/// Deterministic k-means over 2-D points. Seeds with the point farthest
/// from the mean, then repeatedly the point farthest from all chosen
/// centres; ties go to the earliest point.
pub fn kmeans(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let mean = centroid(points.iter());
    if k == 1 {
        return vec![mean];
    }
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centres = vec![farthest(points, |p| d2(p, mean))];
    while centres.len() < k {
        let c = farthest(points, |p| centres.iter().map(|&c| d2(p, c)).fold(f64::INFINITY, f64::min));
        centres.push(c);
    }
    for _ in 0..50 {
        let assign: Vec<usize> = points
            .iter()
            .map(|&p| {
                (0..k)
                    .min_by(|&a, &b| d2(p, centres[a]).total_cmp(&d2(p, centres[b])))
                    .unwrap()
            })
            .collect();
        let next: Vec<[f64; 2]> = (0..k)
            .map(|c| {
                let members: Vec<&[f64; 2]> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    centres[c]
                } else {
                    centroid(members.into_iter())
                }
            })
            .collect();
        if next == centres {
            break;
        }
        centres = next;
    }
    centres
}

fn centroid<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> [f64; 2] {
    let (mut s, mut n) = ([0.0; 2], 0.0);
    for p in points {
        s[0] += p[0];
        s[1] += p[1];
        n += 1.0;
    }
    [s[0] / n, s[1] / n]
}

fn farthest(points: &[[f64; 2]], score: impl Fn([f64; 2]) -> f64) -> [f64; 2] {
    let mut best = (points[0], f64::NEG_INFINITY);
    for &p in points {
        let s = score(p);
        if s > best.1 {
            best = (p, s);
        }
    }
    best.0
}

/// Rounds to a multiple of 1/64 so offsets stay exactly representable.
fn dyadic(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

/// Keypoint offsets from the lattice point, first one being the mask
/// centroid when `k == 1`.
pub fn keypoint_offsets(shape: Shape, size: u32, k: usize) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = shape_mask(shape, size).iter().map(|&(x, y)| [x as f64 + 0.5, y as f64 + 0.5]).collect();
    kmeans(&pts, k).into_iter().map(|[x, y]| [dyadic(x), dyadic(y)]).collect()
}

fn lattice(p: [f64; 2]) -> (i64, i64) {
    (p[0].round() as i64, p[1].round() as i64)
}

/// Object ids in the triplet: `o{i}` with one keypoint, `o{i}k{j}` with
/// several.
pub fn keypoint_track_id(object: usize, keypoint: usize, keypoints: usize) -> String {
    if keypoints == 1 {
        format!("o{object}")
    } else {
        format!("o{object}k{keypoint}")
    }
}

/// Renders a scene, annotating tracks, boxes and template captions.
pub fn render_scene(spec: &SceneSpec) -> Result<ClipRecord> {
    spec.validate()?;
    let (w, h) = spec.frame_size;
    let t = spec.num_frames;
    let masks: Vec<Vec<(i32, i32)>> = spec.objects.iter().map(|o| shape_mask(o.shape, o.size)).collect();
    let centroids: Vec<[f64; 2]> = spec
        .objects
        .iter()
        .map(|o| keypoint_offsets(o.shape, o.size, 1)[0])
        .collect();
    let lattice_pos: Vec<Vec<(i64, i64)>> = spec
        .objects
        .iter()
        .map(|o| (0..t).map(|f| lattice(o.motion.position(f))).collect())
        .collect();
    // Object centre (mask centroid) per frame.
    let centre = |i: usize, f: usize| {
        let (x, y) = lattice_pos[i][f];
        Point::new((x as f64 + centroids[i][0]) as f32, (y as f64 + centroids[i][1]) as f32)
    };
    let drawn = |i: usize, f: usize| centre(i, f).in_frame(spec.frame_size);

    let mut frames = Vec::with_capacity(t);
    let mut owners = Vec::with_capacity(t);
    for f in 0..t {
        let mut img = spec.background.render(w, h);
        let mut owner = vec![usize::MAX; (w * h) as usize];
        for (i, obj) in spec.objects.iter().enumerate() {
            if !drawn(i, f) {
                continue;
            }
            let (cx, cy) = lattice_pos[i][f];
            for &(dx, dy) in &masks[i] {
                let (px, py) = (cx + dx as i64, cy + dy as i64);
                if px >= 0 && py >= 0 && px < w as i64 && py < h as i64 {
                    img.put_pixel(px as u32, py as u32, Rgb(obj.color.rgb()));
                    owner[(py as u32 * w + px as u32) as usize] = i;
                }
            }
        }
        frames.push(img);
        owners.push(owner);
    }

    let visible_count = |i: usize, f: usize| owners[f].iter().filter(|&&o| o == i).count();
    let object_visible: Vec<Vec<bool>> = (0..spec.objects.len())
        .map(|i| (0..t).map(|f| drawn(i, f) && visible_count(i, f) >= MIN_VISIBLE_PIXELS).collect())
        .collect();

    let mut ground_truth = Vec::new();
    let mut triplet = MultimodalTriplet::new(spec.frame_size, t);
    for (i, obj) in spec.objects.iter().enumerate() {
        let pts: Vec<Point> = (0..t).map(|f| centre(i, f)).collect();
        let gt = TrajectoryTrack::new(format!("o{i}"), pts, object_visible[i].clone());
        if !gt.visibility.iter().any(|&v| v) {
            return Err(Error::InvalidArgument(format!("object {i} is never visible")));
        }
        let caption = Caption::new(fill_caption(obj, &gt, spec), format!("the {} {}", obj.color.name(), obj.shape.name()));
        // Box at the first-frame position, even when that is off screen.
        let (bx, by) = lattice_pos[i][0];
        let bbox = BBox::new(bx as f32, by as f32, obj.size as f32, obj.size as f32);
        for (j, off) in keypoint_offsets(obj.shape, obj.size, obj.keypoints).into_iter().enumerate() {
            let points: Vec<Point> = (0..t)
                .map(|f| {
                    let (x, y) = lattice_pos[i][f];
                    Point::new((x as f64 + off[0]) as f32, (y as f64 + off[1]) as f32)
                })
                .collect();
            let vis = (0..t).map(|f| object_visible[i][f] && points[f].in_frame(spec.frame_size)).collect();
            let id = keypoint_track_id(i, j, obj.keypoints);
            triplet.push_foreground(TrajectoryTrack::new(id, points, vis), bbox, caption.clone());
        }
        ground_truth.push(gt);
    }

    // Static background points away from every object's first-frame box.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.background_points && attempts < 1000 {
        attempts += 1;
        let p = Point::new(rng.random_range(0..w) as f32 + 0.5, rng.random_range(0..h) as f32 + 0.5);
        let clear = spec.objects.iter().enumerate().all(|(i, o)| {
            let (x, y) = lattice_pos[i][0];
            let r = o.size as f32 / 2.0 + 1.0;
            (p.x - x as f32).abs() > r || (p.y - y as f32).abs() > r
        });
        if !clear {
            continue;
        }
        let pix = (p.y as u32 * w + p.x as u32) as usize;
        let vis = (0..t).map(|f| owners[f][pix] == usize::MAX).collect();
        triplet.tracks.push(TrajectoryTrack::background(format!("bg{placed}"), vec![p; t], vis));
        placed += 1;
    }

    let report = validate_triplet(&triplet);
    if !report.is_empty() {
        return Err(Error::Invalid(report));
    }
    let motion_score = motion_score(&triplet.tracks, false)?;
    Ok(ClipRecord {
        frames,
        triplet,
        ground_truth,
        motion_score,
    })
}

fn motion_phrase(obj: &SceneObject, track: &TrajectoryTrack, spec: &SceneSpec) -> String {
    let vis: Vec<usize> = (0..track.points.len()).filter(|&f| track.visibility[f]).collect();
    let (first, last) = (vis[0], *vis.last().unwrap());
    let (a, b) = (track.points[first], track.points[last]);
    let (dx, dy) = ((b.x - a.x) as f64, (b.y - a.y) as f64);
    let dist = dx.hypot(dy);
    let horiz = if dx > 0.0 { "right" } else { "left" };
    let vert = if dy > 0.0 { "down" } else { "up" };
    let direction = if dist < 3.0 {
        None
    } else if dx.abs() >= 2.0 * dy.abs() {
        Some(horiz.to_owned())
    } else if dy.abs() >= 2.0 * dx.abs() {
        Some(vert.to_owned())
    } else {
        Some(format!("{vert} and {horiz}"))
    };
    let frames = (last - first).max(1) as f64;
    let pace = dist / frames;
    let verb = if obj.motion.path.is_curved() { "curves" } else { "moves" };
    let mut phrase = match &direction {
        None => "stays still".to_owned(),
        Some(d) => {
            let mut s = format!("{verb} {d}");
            if pace > 2.5 {
                s.push_str(" quickly");
            } else if pace < 1.0 {
                s.push_str(" slowly");
            }
            s
        }
    };
    if first > 0 {
        let (w, h) = (spec.frame_size.0 as f32, spec.frame_size.1 as f32);
        let edges = [(a.x, "left"), (w - a.x, "right"), (a.y, "top"), (h - a.y, "bottom")];
        let side = edges.iter().min_by(|x, y| x.0.total_cmp(&y.0)).unwrap().1;
        phrase = format!("enters from the {side} and {phrase}");
    }
    if last + 1 < track.points.len() && !track.visibility[last + 1..].iter().any(|&v| v) {
        phrase.push_str(" and exits");
    }
    phrase
}

fn fill_caption(obj: &SceneObject, track: &TrajectoryTrack, spec: &SceneSpec) -> String {
    obj.caption_template
        .replace("{color}", obj.color.name())
        .replace("{shape}", obj.shape.name())
        .replace("{motion}", &motion_phrase(obj, track, spec))
}

/// Every word the caption templates can produce.
pub fn caption_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec![
        "the", "and", "moves", "curves", "stays", "still", "left", "right", "up", "down", "top", "bottom", "enters", "from", "exits",
        "quickly", "slowly", "a",
    ];
    words.extend(PaletteColor::ALL.iter().map(|c| c.name()));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    Vocabulary::new(words)
}

/// Average cumulative displacement per track, counting only steps whose
/// two endpoints are visible. `foreground_only` skips background tracks.
pub fn motion_score(tracks: &[TrajectoryTrack], foreground_only: bool) -> Result<f64> {
    let used: Vec<&TrajectoryTrack> = tracks.iter().filter(|t| !(foreground_only && t.is_background)).collect();
    if used.is_empty() {
        return Err(Error::InvalidArgument("motion score needs at least one track".into()));
    }
    let total: f64 = used
        .iter()
        .map(|t| {
            (1..t.points.len())
                .filter(|&f| t.visibility[f] && t.visibility[f - 1])
                .map(|f| t.points[f].dist(t.points[f - 1]))
                .sum::<f64>()
        })
        .sum();
    Ok(total / used.len() as f64)
}

/// Keeps clips whose motion score reaches `threshold`, in order.
pub fn filter_clips(clips: Vec<ClipRecord>, threshold: f64) -> Vec<ClipRecord> {
    clips.into_iter().filter(|c| c.motion_score >= threshold).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn line_object(color: PaletteColor, shape: Shape, from: [f64; 2], to: [f64; 2], t: usize) -> SceneObject {
        SceneObject {
            shape,
            color,
            size: 10,
            motion: Motion {
                path: Path::Line { from, to },
                speed: SpeedProfile::Constant,
                start_frame: 0,
                end_frame: t - 1,
            },
            keypoints: 1,
            caption_template: DEFAULT_CAPTION_TEMPLATE.into(),
        }
    }

    fn spec(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            frame_size: (64, 64),
            num_frames: 16,
            objects,
            background: Background::Solid { color: [30, 30, 40] },
            background_points: 2,
            seed: 7,
        }
    }

    #[test]
    fn left_to_right_circle() {
        let clip = render_scene(&spec(vec![line_object(PaletteColor::Red, Shape::Circle, [8.0, 32.0], [56.0, 32.0], 16)])).unwrap();
        let gt = &clip.ground_truth[0];
        assert!(gt.visibility.iter().all(|&v| v));
        assert!(gt.points.windows(2).all(|p| p[1].x > p[0].x));
        assert_eq!(clip.triplet.captions["o0"].text, "the red circle moves right quickly");
        assert_eq!(clip.frames.len(), 16);
        assert_eq!(clip.triplet.tracks.iter().filter(|t| t.is_background).count(), 2);
    }

    #[test]
    fn exiting_object_turns_invisible_and_stays_so() {
        let clip = render_scene(&spec(vec![line_object(PaletteColor::Blue, Shape::Square, [20.0, 20.0], [95.0, 20.0], 16)])).unwrap();
        let gt = &clip.ground_truth[0];
        let first_out = gt.points.iter().position(|p| !p.in_frame((64, 64))).unwrap();
        assert!(gt.visibility[..first_out].iter().all(|&v| v));
        assert!(gt.visibility[first_out..].iter().all(|&v| !v));
        assert!(clip.triplet.captions["o0"].text.ends_with("and exits"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(vec![
            line_object(PaletteColor::Red, Shape::Triangle, [8.0, 12.0], [50.0, 40.0], 16),
            line_object(PaletteColor::Green, Shape::Circle, [50.0, 50.0], [10.0, 10.0], 16),
        ]);
        assert_eq!(render_scene(&s).unwrap(), render_scene(&s).unwrap());
    }

    #[test]
    fn triplet_visibility_matches_frame_bounds_and_pixels() {
        let s = spec(vec![line_object(PaletteColor::Yellow, Shape::Circle, [-10.0, 30.0], [40.0, 30.0], 16)]);
        let clip = render_scene(&s).unwrap();
        let tr = &clip.triplet.tracks[0];
        for f in 0..16 {
            let count = clip.frames[f].pixels().filter(|p| p.0 == [255, 255, 0]).count();
            assert_eq!(tr.visibility[f], tr.points[f].in_frame((64, 64)) && count >= MIN_VISIBLE_PIXELS, "frame {f}");
        }
        assert!(clip.triplet.captions["o0"].text.starts_with("the yellow circle enters from the left"));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(vec![line_object(PaletteColor::Red, Shape::Circle, [8.0, 32.0], [56.0, 32.0], 16)]);
        s.objects[0].size = 64;
        assert!(render_scene(&s).is_err());
        let o = line_object(PaletteColor::Red, Shape::Circle, [8.0, 32.0], [56.0, 32.0], 16);
        assert!(render_scene(&spec(vec![o.clone(), o])).is_err());
        assert!(render_scene(&spec(vec![])).is_err());
    }

    #[test]
    fn mask_centroids() {
        for size in [8, 9, 12, 15] {
            for shape in [Shape::Circle, Shape::Square] {
                let c = mask_centroid(&shape_mask(shape, size));
                assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12, "{shape:?} {size}");
            }
            let c = mask_centroid(&shape_mask(Shape::Triangle, size));
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 0.5);
        }
    }

    #[test]
    fn kmeans_two_clusters() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [10.0, 10.0], [11.0, 10.0], [10.0, 11.0]];
        let mut c = kmeans(&pts, 2);
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((c[0][0] - 1.0 / 3.0).abs() < 1e-12 && (c[1][0] - 31.0 / 3.0).abs() < 1e-12);
        assert_eq!(keypoint_offsets(Shape::Square, 10, 3).len(), 3);
    }

    #[test]
    fn motion_score_cases() {
        let still = TrajectoryTrack::new("a", vec![Point::new(3.0, 3.0); 5], vec![true; 5]);
        assert_eq!(motion_score(&[still.clone()], false).unwrap(), 0.0);
        let moving = TrajectoryTrack::new("b", (0..5).map(|i| Point::new(i as f32, 0.0)).collect(), vec![true; 5]);
        assert_eq!(motion_score(&[moving.clone()], false).unwrap(), 4.0);
        assert_eq!(motion_score(&[moving.clone(), still], false).unwrap(), 2.0);
        let mut gap = moving;
        gap.visibility[2] = false;
        assert_eq!(motion_score(&[gap], false).unwrap(), 2.0);
        assert!(motion_score(&[], false).is_err());
        let bg = TrajectoryTrack::background("g", vec![Point::new(1.0, 1.0); 5], vec![true; 5]);
        assert!(motion_score(&[bg], true).is_err());
    }

    #[test]
    fn vocabulary_covers_generated_captions() {
        let v = caption_vocabulary();
        let clip = render_scene(&spec(vec![line_object(PaletteColor::Orange, Shape::Triangle, [-8.0, 8.0], [40.0, 50.0], 16)])).unwrap();
        for c in clip.triplet.captions.values() {
            assert!(v.tokenize(&c.text).iter().all(|&t| t != 0), "{}", c.text);
        }
        assert_eq!(PaletteColor::find_in("The Orange triangle"), Some(PaletteColor::Orange));
    }
}
