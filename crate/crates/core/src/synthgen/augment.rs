//! Cropping, reference extraction and trajectory overlays.

use std::collections::BTreeMap;

use image::{imageops, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use super::{motion_score, ClipRecord};
use crate::error::{ensure_arg, Error, Result};
use crate::triplet::{BBox, Point, ReferencePlacement, TrajectoryTrack};

/// Pixel rectangle `[x, x + w] x [y, y + h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn full(frame_size: (u32, u32)) -> Self {
        Self {
            x: 0,
            y: 0,
            w: frame_size.0,
            h: frame_size.1,
        }
    }

    pub fn intersect(&self, inner: &CropRect) -> CropRect {
        // `inner` is given in this crop's coordinates.
        let x = self.x + inner.x;
        let y = self.y + inner.y;
        CropRect {
            x,
            y,
            w: inner.w.min(self.w.saturating_sub(inner.x)),
            h: inner.h.min(self.h.saturating_sub(inner.y)),
        }
    }
}

fn shift_track(track: &TrajectoryTrack, rect: &CropRect) -> TrajectoryTrack {
    let size = (rect.w, rect.h);
    let points: Vec<Point> = track
        .points
        .iter()
        .map(|p| Point::new(p.x - rect.x as f32, p.y - rect.y as f32))
        .collect();
    let visibility = track.visibility.iter().zip(&points).map(|(&v, p)| v && p.in_frame(size)).collect();
    TrajectoryTrack {
        track_id: track.track_id.clone(),
        is_background: track.is_background,
        points,
        visibility,
    }
}

fn shift_bbox(b: &BBox, rect: &CropRect) -> BBox {
    let (x0, y0) = (b.x_min() - rect.x as f32, b.y_min() - rect.y as f32);
    let (x1, y1) = (b.x_max() - rect.x as f32, b.y_max() - rect.y as f32);
    let (cx0, cy0) = (x0.max(0.0), y0.max(0.0));
    let (cx1, cy1) = (x1.min(rect.w as f32), y1.min(rect.h as f32));
    if cx0 < cx1 && cy0 < cy1 {
        BBox::new((cx0 + cx1) / 2.0, (cy0 + cy1) / 2.0, cx1 - cx0, cy1 - cy0)
    } else {
        BBox::new(b.cx - rect.x as f32, b.cy - rect.y as f32, b.w, b.h)
    }
}

/// Crops a clip. Points leaving the crop become invisible, which turns
/// objects that are outside at first into entering ones. Tracks that end up
/// never visible are removed; returns `None` when no foreground track is
/// left.
pub fn crop_augment(clip: &ClipRecord, rect: CropRect) -> Result<Option<ClipRecord>> {
    let (fw, fh) = clip.triplet.frame_size;
    ensure_arg!(rect.w > 0 && rect.h > 0, "crop has zero area");
    ensure_arg!(rect.x + rect.w <= fw && rect.y + rect.h <= fh, "crop {rect:?} exceeds the {fw}x{fh} frame");

    let frames = clip
        .frames
        .iter()
        .map(|f| imageops::crop_imm(f, rect.x, rect.y, rect.w, rect.h).to_image())
        .collect();
    let mut triplet = clip.triplet.clone();
    triplet.frame_size = (rect.w, rect.h);
    triplet.tracks = clip
        .triplet
        .tracks
        .iter()
        .map(|t| shift_track(t, &rect))
        .filter(|t| t.visibility.iter().any(|&v| v))
        .collect();
    if triplet.foreground().next().is_none() {
        return Ok(None);
    }
    let kept: Vec<String> = triplet.tracks.iter().map(|t| t.track_id.clone()).collect();
    triplet.bboxes = clip
        .triplet
        .bboxes
        .iter()
        .filter(|(id, _)| kept.contains(id))
        .map(|(id, b)| (id.clone(), shift_bbox(b, &rect)))
        .collect();
    triplet.captions.retain(|id, _| kept.contains(id));
    triplet.references = clip
        .triplet
        .references
        .iter()
        .filter(|r| r.track_id.as_ref().is_none_or(|id| kept.contains(id)))
        .map(|r| {
            let mut r = r.clone();
            r.target_bbox.cx -= rect.x as f32;
            r.target_bbox.cy -= rect.y as f32;
            r
        })
        .collect();
    let ground_truth = clip.ground_truth.iter().map(|t| shift_track(t, &rect)).collect();
    let motion_score = motion_score(&triplet.tracks, false)?;
    Ok(Some(ClipRecord {
        frames,
        triplet,
        ground_truth,
        motion_score,
    }))
}

/// Mild affine change applied to an extracted reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub translate: (f64, f64),
    pub scale: f64,
    /// Clockwise, in degrees.
    pub rotation: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            translate: (0.0, 0.0),
            scale: 1.0,
            rotation: 0.0,
        }
    }
}

/// Cuts the pixels under `bbox` out of `frame` and applies `affine`
/// against a transparent canvas sized to the transformed extent. The
/// placement puts the result back where it came from, moved by the
/// translation. `image_ref` of the placement is left empty.
pub fn extract_reference(frame: &RgbImage, bbox: &BBox, affine: &Affine) -> Result<(RgbaImage, ReferencePlacement)> {
    let (fw, fh) = frame.dimensions();
    ensure_arg!((0.5..=2.0).contains(&affine.scale), "scale {} outside [0.5, 2]", affine.scale);
    ensure_arg!(affine.rotation.abs() <= 30.0, "rotation {} exceeds 30 degrees", affine.rotation);
    ensure_arg!(
        affine.translate.0.abs() <= 0.25 * fw as f64 && affine.translate.1.abs() <= 0.25 * fh as f64,
        "translation exceeds a quarter of the frame"
    );
    if !bbox.is_valid() || !bbox.intersects_frame((fw, fh)) {
        return Err(Error::InvalidArgument("reference box lies outside the frame".into()));
    }
    let x0 = (bbox.x_min().floor().max(0.0) as u32).min(fw - 1);
    let y0 = (bbox.y_min().floor().max(0.0) as u32).min(fh - 1);
    let x1 = (bbox.x_max().ceil() as u32).clamp(x0 + 1, fw);
    let y1 = (bbox.y_max().ceil() as u32).clamp(y0 + 1, fh);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let crop = imageops::crop_imm(frame, x0, y0, cw, ch).to_image();

    let s = affine.scale;
    let (sin, cos) = affine.rotation.to_radians().sin_cos();
    let (sw, sh) = (cw as f64 * s, ch as f64 * s);
    let ow = (sw * cos.abs() + sh * sin.abs() - 1e-9).ceil().max(1.0) as u32;
    let oh = (sw * sin.abs() + sh * cos.abs() - 1e-9).ceil().max(1.0) as u32;
    let out = RgbaImage::from_fn(ow, oh, |ox, oy| {
        let dx = ox as f64 + 0.5 - ow as f64 / 2.0;
        let dy = oy as f64 + 0.5 - oh as f64 / 2.0;
        let lx = cos * dx + sin * dy;
        let ly = -sin * dx + cos * dy;
        let u = lx / s + cw as f64 / 2.0;
        let v = ly / s + ch as f64 / 2.0;
        if u >= 0.0 && v >= 0.0 && u < cw as f64 && v < ch as f64 {
            let Rgb(p) = *crop.get_pixel(u as u32, v as u32);
            Rgba([p[0], p[1], p[2], 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    });
    let placement = ReferencePlacement {
        image_ref: String::new(),
        target_bbox: BBox::new(
            (x0 as f64 + cw as f64 / 2.0 + affine.translate.0) as f32,
            (y0 as f64 + ch as f64 / 2.0 + affine.translate.1) as f32,
            ow as f32,
            oh as f32,
        ),
        rotation: 0.0,
        track_id: None,
    };
    Ok((out, placement))
}

/// Trajectory colours, one per object, distinct from each other.
const OVERLAY_COLORS: [[u8; 3]; 6] = [
    [255, 105, 180],
    [127, 255, 212],
    [255, 215, 120],
    [160, 120, 255],
    [120, 200, 255],
    [200, 255, 120],
];

fn plot(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn draw_line(img: &mut RgbImage, a: Point, b: Point, c: [u8; 3]) {
    let steps = (a.dist(b).ceil() as usize * 2).max(1);
    for i in 0..=steps {
        let s = i as f32 / steps as f32;
        let x = a.x + s * (b.x - a.x);
        let y = a.y + s * (b.y - a.y);
        plot(img, x.floor() as i64, y.floor() as i64, c);
    }
}

/// Draws every foreground trajectory over each frame, one colour per
/// object (tracks sharing a subject hint share a colour). Segments with an
/// invisible end and invisible points are skipped.
pub fn render_trajectory_overlay(clip: &ClipRecord) -> Vec<RgbImage> {
    let mut color_of: BTreeMap<&str, [u8; 3]> = BTreeMap::new();
    let mut next = 0;
    let mut tracks: Vec<(&TrajectoryTrack, [u8; 3])> = Vec::new();
    for t in clip.triplet.foreground() {
        let key = clip.triplet.captions.get(&t.track_id).map_or(t.track_id.as_str(), |c| c.subject_hint.as_str());
        let c = *color_of.entry(key).or_insert_with(|| {
            let c = OVERLAY_COLORS[next % OVERLAY_COLORS.len()];
            next += 1;
            c
        });
        tracks.push((t, c));
    }
    clip.frames
        .iter()
        .map(|frame| {
            let mut img = frame.clone();
            for &(t, c) in &tracks {
                for f in 1..t.points.len() {
                    if t.visibility[f] && t.visibility[f - 1] {
                        draw_line(&mut img, t.points[f - 1], t.points[f], c);
                    }
                }
                for (p, _) in t.points.iter().zip(&t.visibility).filter(|(_, &v)| v) {
                    let (x, y) = (p.x.floor() as i64, p.y.floor() as i64);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            plot(&mut img, x + dx, y + dy, c);
                        }
                    }
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::line_object;
    use super::super::*;
    use super::*;
    use crate::condition::paste_reference;
    use std::collections::BTreeSet;

    fn clip(objects: Vec<SceneObject>) -> ClipRecord {
        render_scene(&SceneSpec {
            frame_size: (64, 64),
            num_frames: 16,
            objects,
            background: Background::Checker { a: [20, 20, 20], b: [60, 50, 40], cell: 8 },
            background_points: 3,
            seed: 3,
        })
        .unwrap()
    }

    fn mover() -> ClipRecord {
        clip(vec![line_object(PaletteColor::Red, Shape::Circle, [8.0, 32.0], [53.0, 32.0], 16)])
    }

    #[test]
    fn identity_crop() {
        let c = mover();
        assert_eq!(crop_augment(&c, CropRect::full((64, 64))).unwrap().unwrap(), c);
    }

    #[test]
    fn crop_creates_entry_track() {
        // x moves 8 -> 53 by 3 px per frame; the crop starts at x = 23.
        let c = mover();
        let out = crop_augment(&c, CropRect { x: 23, y: 0, w: 41, h: 64 }).unwrap().unwrap();
        let t = out.triplet.track("o0").unwrap();
        assert_eq!(t.visibility, [vec![false; 5], vec![true; 11]].concat());
        assert_eq!(out.frames[0].dimensions(), (41, 64));
        assert!(crate::triplet::validate_triplet(&out.triplet).is_empty());
    }

    #[test]
    fn crop_edge_is_inclusive_and_empty_crop_drops() {
        let c = clip(vec![line_object(PaletteColor::Red, Shape::Circle, [20.0, 20.0], [20.0, 20.0], 16)]);
        let out = crop_augment(&c, CropRect { x: 20, y: 20, w: 30, h: 30 }).unwrap().unwrap();
        assert!(out.triplet.track("o0").unwrap().visibility.iter().all(|&v| v));
        assert_eq!(out.triplet.track("o0").unwrap().points[0], Point::new(0.0, 0.0));
        assert!(crop_augment(&c, CropRect { x: 40, y: 40, w: 20, h: 20 }).unwrap().is_none());
        assert!(crop_augment(&c, CropRect { x: 40, y: 40, w: 30, h: 20 }).is_err());
    }

    #[test]
    fn nested_crops_equal_intersection() {
        let c = clip(vec![
            line_object(PaletteColor::Red, Shape::Circle, [8.0, 32.0], [53.0, 40.0], 16),
            line_object(PaletteColor::Blue, Shape::Triangle, [50.0, 8.0], [12.0, 50.0], 16),
        ]);
        let outer = CropRect { x: 4, y: 6, w: 50, h: 52 };
        let inner = CropRect { x: 7, y: 3, w: 40, h: 40 };
        let twice = crop_augment(&crop_augment(&c, outer).unwrap().unwrap(), inner).unwrap().unwrap();
        let once = crop_augment(&c, outer.intersect(&inner)).unwrap().unwrap();
        assert_eq!(twice.triplet, once.triplet);
        assert_eq!(twice.frames, once.frames);
    }

    #[test]
    fn reference_extents() {
        let frame = mover().frames[0].clone();
        let b = BBox::new(13.0, 27.0, 10.0, 10.0);
        let (img, _) = extract_reference(&frame, &b, &Affine::identity()).unwrap();
        assert_eq!(img.dimensions(), (10, 10));
        let (img, p) = extract_reference(&frame, &b, &Affine { scale: 2.0, ..Affine::identity() }).unwrap();
        assert_eq!(img.dimensions(), (20, 20));
        assert_eq!((p.target_bbox.w, p.target_bbox.h), (20.0, 20.0));
        let (img, _) = extract_reference(&frame, &b, &Affine { rotation: 30.0, ..Affine::identity() }).unwrap();
        assert_eq!(img.dimensions(), (14, 14));
        assert!(extract_reference(&frame, &BBox::new(-20.0, 5.0, 4.0, 4.0), &Affine::identity()).is_err());
        assert!(extract_reference(&frame, &b, &Affine { scale: 3.0, ..Affine::identity() }).is_err());
    }

    #[test]
    fn identity_reference_pastes_back_exactly() {
        let c = mover();
        let frame = c.frames[0].clone();
        let b = BBox::new(13.0, 32.0, 12.0, 12.0);
        let (img, placement) = extract_reference(&frame, &b, &Affine::identity()).unwrap();
        let mut canvas = RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]));
        paste_reference(&mut canvas, &placement, &img);
        for y in 26..38 {
            for x in 7..19 {
                assert_eq!(canvas.get_pixel(x, y), frame.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn overlay_colors_and_static_dots() {
        let c = clip(vec![
            line_object(PaletteColor::Red, Shape::Circle, [8.0, 12.0], [53.0, 12.0], 16),
            line_object(PaletteColor::Green, Shape::Square, [8.0, 50.0], [53.0, 50.0], 16),
        ]);
        let over = render_trajectory_overlay(&c);
        let used: BTreeSet<[u8; 3]> = over[3]
            .pixels()
            .zip(c.frames[3].pixels())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0)
            .collect();
        assert_eq!(used.len(), 2);

        let still = clip(vec![line_object(PaletteColor::Red, Shape::Circle, [30.0, 30.0], [30.0, 30.0], 16)]);
        let over = render_trajectory_overlay(&still);
        let p = still.triplet.track("o0").unwrap().points[0];
        for (x, y, px) in over[0].enumerate_pixels() {
            if px != still.frames[0].get_pixel(x, y) {
                assert!((x as f32 - p.x).abs() <= 2.0 && (y as f32 - p.y).abs() <= 2.0);
            }
        }
    }

    #[test]
    fn overlay_skips_invisible_tracks() {
        let mut c = mover();
        for v in &mut c.triplet.tracks[0].visibility {
            *v = false;
        }
        assert_eq!(render_trajectory_overlay(&c), c.frames);
    }
}
