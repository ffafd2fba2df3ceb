//! Conditioning tensors for the generator: a fixed block-pooling frame
//! encoder, Gaussian trajectory heatmaps, point feature maps, reference
//! pasting and the channel-concatenated bundle.

use std::collections::HashMap;
use std::ops::Range;

use image::{Rgb, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::triplet::{MultimodalTriplet, ReferencePlacement, TrajectoryTrack};

/// Channels produced by [`encode_frame`].
pub const LATENT_CHANNELS: usize = 16;

/// Channel order of the concatenated generator input. Stored in checkpoints;
/// a mismatch refuses to load.
pub const CHANNEL_LAYOUT: &str = "noise:C|image_latent:C|mask:1|heatmap:1|point_map:C";

pub const DEFAULT_HEATMAP_SIGMA: f64 = 1.5;

/// Geometry of the latent grid relative to the pixel video.
///
/// Latent frame 0 holds pixel frame 0. Latent frame `k >= 1` covers pixel
/// frames `[1 + (k-1)s, 1 + ks)` (clipped to the clip length) and samples
/// the first of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub frame_size: (u32, u32),
    pub num_frames: usize,
    pub spatial_stride: u32,
    pub temporal_stride: usize,
}

impl LatentGrid {
    pub fn new(frame_size: (u32, u32), num_frames: usize, spatial_stride: u32, temporal_stride: usize) -> Result<Self> {
        ensure_arg!(spatial_stride >= 2 && spatial_stride.is_multiple_of(2), "spatial stride {spatial_stride} must be even and >= 2");
        ensure_arg!(temporal_stride >= 1, "temporal stride must be >= 1");
        ensure_arg!(num_frames >= 2, "need at least 2 frames");
        ensure_arg!(
            frame_size.0 > 0 && frame_size.1 > 0 && frame_size.0.is_multiple_of(spatial_stride) && frame_size.1.is_multiple_of(spatial_stride),
            "frame size {:?} not divisible by stride {spatial_stride}",
            frame_size
        );
        Ok(Self {
            frame_size,
            num_frames,
            spatial_stride,
            temporal_stride,
        })
    }

    /// 16-frame 64x64 clips at stride 8 (spatial) and 4 (temporal).
    pub fn desk_default() -> Self {
        Self::new((64, 64), 16, 8, 4).expect("valid default grid")
    }

    pub fn latent_frames(&self) -> usize {
        1 + (self.num_frames - 1).div_ceil(self.temporal_stride)
    }

    pub fn height(&self) -> usize {
        (self.frame_size.1 / self.spatial_stride) as usize
    }

    pub fn width(&self) -> usize {
        (self.frame_size.0 / self.spatial_stride) as usize
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height() * self.width()
    }

    pub fn num_tokens(&self) -> usize {
        self.latent_frames() * self.tokens_per_frame()
    }

    /// Pixel frames covered by latent frame `k`.
    pub fn frame_range(&self, k: usize) -> Range<usize> {
        if k == 0 {
            0..1
        } else {
            let a = 1 + (k - 1) * self.temporal_stride;
            a..(a + self.temporal_stride).min(self.num_frames)
        }
    }

    /// Pixel frame whose content stands for latent frame `k`.
    pub fn sample_frame(&self, k: usize) -> usize {
        self.frame_range(k).start
    }

    /// Pixel-space center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.spatial_stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Cell containing a pixel-space point, clamped to the grid.
    pub fn cell_of(&self, x: f32, y: f32) -> (usize, usize) {
        let s = self.spatial_stride as f32;
        let col = ((x / s).floor().max(0.0) as usize).min(self.width() - 1);
        let row = ((y / s).floor().max(0.0) as usize).min(self.height() - 1);
        (row, col)
    }

    pub fn token_index(&self, k: usize, row: usize, col: usize) -> usize {
        (k * self.height() + row) * self.width() + col
    }
}

/// A `(frames, height, width, channels)` volume, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn for_grid(grid: &LatentGrid, channels: usize) -> Self {
        Self::zeros(grid.latent_frames(), grid.height(), grid.width(), channels)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.shape() == other.shape()
    }

    pub fn num_cells(&self) -> usize {
        self.frames * self.height * self.width
    }

    fn offset(&self, k: usize, row: usize, col: usize) -> usize {
        ((k * self.height + row) * self.width + col) * self.channels
    }

    pub fn cell(&self, k: usize, row: usize, col: usize) -> &[f64] {
        let o = self.offset(k, row, col);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, k: usize, row: usize, col: usize) -> &mut [f64] {
        let o = self.offset(k, row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.height * self.width * self.channels;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.height * self.width * self.channels;
        &mut self.data[k * n..(k + 1) * n]
    }
}

#[inline]
fn to_unit(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Encodes one frame into an `(H/s, W/s, 16)` latent.
///
/// Each `s x s` block yields: the mean colour of its four quadrants (12
/// channels), the block mean colour (3) and the block luma standard
/// deviation (1). Colours map `[0, 1]` to `[-1, 1]`, the deviation `[0, 0.5]`
/// to `[-1, 1]`. A cell depends only on the pixels of its own block.
pub fn encode_frame(frame: &RgbImage, spatial_stride: u32) -> Result<Latent> {
    let s = spatial_stride;
    ensure_arg!(s >= 2 && s.is_multiple_of(2), "spatial stride {s} must be even and >= 2");
    let (w, h) = frame.dimensions();
    if w % s != 0 || h % s != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!("frame {w}x{h} is not divisible by stride {s}")));
    }
    let (hl, wl) = ((h / s) as usize, (w / s) as usize);
    let half = s / 2;
    let quad_n = (half * half) as f64;
    let block_n = (s * s) as f64;
    let mut out = Latent::zeros(1, hl, wl, LATENT_CHANNELS);
    for row in 0..hl {
        for col in 0..wl {
            let (x0, y0) = (col as u32 * s, row as u32 * s);
            let mut quad = [[0.0f64; 3]; 4];
            let mut luma_sum = 0.0;
            let mut luma_sq = 0.0;
            for dy in 0..s {
                for dx in 0..s {
                    let Rgb(p) = *frame.get_pixel(x0 + dx, y0 + dy);
                    let q = ((dy / half) * 2 + dx / half) as usize;
                    let rgb = [to_unit(p[0]), to_unit(p[1]), to_unit(p[2])];
                    for c in 0..3 {
                        quad[q][c] += rgb[c];
                    }
                    let l = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                    luma_sum += l;
                    luma_sq += l * l;
                }
            }
            let cell = out.cell_mut(0, row, col);
            let mut block = [0.0; 3];
            for q in 0..4 {
                for c in 0..3 {
                    let m = quad[q][c] / quad_n;
                    cell[q * 3 + c] = 2.0 * m - 1.0;
                    block[c] += quad[q][c];
                }
            }
            for c in 0..3 {
                cell[12 + c] = 2.0 * block[c] / block_n - 1.0;
            }
            let mean = luma_sum / block_n;
            let var = (luma_sq / block_n - mean * mean).max(0.0);
            cell[15] = 4.0 * var.sqrt() - 1.0;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_frame`] up to quadrant resolution: every quadrant is
/// painted with its mean colour.
pub fn decode_frame(latent: &Latent, k: usize, spatial_stride: u32) -> RgbImage {
    let s = spatial_stride;
    let half = s / 2;
    let mut img = RgbImage::new(latent.width as u32 * s, latent.height as u32 * s);
    for row in 0..latent.height {
        for col in 0..latent.width {
            let cell = latent.cell(k, row, col);
            for dy in 0..s {
                for dx in 0..s {
                    let q = ((dy / half) * 2 + dx / half) as usize;
                    let px = |c: usize| (((cell[q * 3 + c] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel(col as u32 * s + dx, row as u32 * s + dy, Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    img
}

/// Encodes a pixel video into the latent grid by sampling one pixel frame
/// per latent frame.
pub fn encode_video(frames: &[RgbImage], grid: &LatentGrid) -> Result<Latent> {
    if frames.len() != grid.num_frames {
        return Err(Error::Shape(format!("{} frames for a {}-frame grid", frames.len(), grid.num_frames)));
    }
    let mut out = Latent::for_grid(grid, LATENT_CHANNELS);
    for k in 0..grid.latent_frames() {
        let enc = encode_frame(&frames[grid.sample_frame(k)], grid.spatial_stride)?;
        if enc.height != grid.height() || enc.width != grid.width() {
            return Err(Error::Shape("frame size does not match grid".into()));
        }
        out.frame_mut(k).copy_from_slice(&enc.data);
    }
    Ok(out)
}

/// Decodes a latent video, holding each latent frame over the pixel frames
/// it covers.
pub fn decode_video(latent: &Latent, grid: &LatentGrid) -> Vec<RgbImage> {
    let mut frames = Vec::with_capacity(grid.num_frames);
    for k in 0..grid.latent_frames() {
        let img = decode_frame(latent, k, grid.spatial_stride);
        for _ in grid.frame_range(k) {
            frames.push(img.clone());
        }
    }
    frames
}

/// Gaussian heatmap of all visible in-frame track points at latent
/// resolution. `sigma` is in latent cells; overlapping blobs combine by
/// maximum.
pub fn rasterize_heatmap(tracks: &[TrajectoryTrack], grid: &LatentGrid, sigma: f64) -> Result<Latent> {
    ensure_arg!(sigma > 0.0, "sigma must be positive, got {sigma}");
    let mut out = Latent::for_grid(grid, 1);
    let s = grid.spatial_stride as f64;
    let denom = 2.0 * sigma * sigma;
    for k in 0..grid.latent_frames() {
        let f = grid.sample_frame(k);
        for track in tracks {
            if !track.visible_in_frame(f, grid.frame_size) {
                continue;
            }
            let p = track.points[f];
            let (px, py) = (p.x as f64 / s, p.y as f64 / s);
            for row in 0..grid.height() {
                for col in 0..grid.width() {
                    let (dx, dy) = (col as f64 + 0.5 - px, row as f64 + 0.5 - py);
                    let v = (-(dx * dx + dy * dy) / denom).exp();
                    let cell = out.cell_mut(k, row, col);
                    if v > cell[0] {
                        cell[0] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Point feature map: the first-frame latent feature under each track's
/// frame-0 point, written at the track's cell in every latent frame where
/// the point is visible. Tracks not visible at frame 0 contribute nothing;
/// when two tracks share a cell the later track id wins.
pub fn build_point_map(tracks: &[TrajectoryTrack], first_frame_latent: &Latent, grid: &LatentGrid) -> Result<Latent> {
    if first_frame_latent.height != grid.height() || first_frame_latent.width != grid.width() {
        return Err(Error::Shape(format!(
            "first-frame latent is {}x{}, grid is {}x{}",
            first_frame_latent.height,
            first_frame_latent.width,
            grid.height(),
            grid.width()
        )));
    }
    let c = first_frame_latent.channels;
    let mut out = Latent::for_grid(grid, c);
    let mut order: Vec<&TrajectoryTrack> = tracks.iter().collect();
    order.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    for track in order {
        if !track.visible_in_frame(0, grid.frame_size) {
            continue;
        }
        let (r0, c0) = grid.cell_of(track.points[0].x, track.points[0].y);
        let feature = first_frame_latent.cell(0, r0, c0).to_vec();
        for k in 0..grid.latent_frames() {
            let f = grid.sample_frame(k);
            if track.visible_in_frame(f, grid.frame_size) {
                let (r, col) = grid.cell_of(track.points[f].x, track.points[f].y);
                out.cell_mut(k, r, col).copy_from_slice(&feature);
            }
        }
    }
    Ok(out)
}

/// Source of reference images by asset id.
pub trait AssetSource {
    fn reference(&self, id: &str) -> Option<&RgbaImage>;
}

impl AssetSource for HashMap<String, RgbaImage> {
    fn reference(&self, id: &str) -> Option<&RgbaImage> {
        self.get(id)
    }
}

/// Composites one reference image onto `frame` at its placement.
///
/// The image is stretched to the target box, rotated clockwise by
/// `rotation` degrees about the box center and alpha-blended with nearest
/// neighbour sampling. Placements that miss the frame change nothing.
pub fn paste_reference(frame: &mut RgbImage, placement: &ReferencePlacement, image: &RgbaImage) {
    let b = placement.target_bbox;
    if !b.is_valid() || !b.intersects_frame(frame.dimensions()) || image.width() == 0 || image.height() == 0 {
        return;
    }
    let theta = (placement.rotation as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy, bw, bh) = (b.cx as f64, b.cy as f64, b.w as f64, b.h as f64);
    let ext_x = (bw * cos.abs() + bh * sin.abs()) / 2.0;
    let ext_y = (bw * sin.abs() + bh * cos.abs()) / 2.0;
    let (fw, fh) = frame.dimensions();
    let x0 = (cx - ext_x).floor().max(0.0) as u32;
    let y0 = (cy - ext_y).floor().max(0.0) as u32;
    let x1 = ((cx + ext_x).ceil().max(0.0) as u32).min(fw);
    let y1 = ((cy + ext_y).ceil().max(0.0) as u32).min(fh);
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    for py in y0..y1 {
        for px in x0..x1 {
            let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            // Inverse rotation into the box frame.
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            let u = (lx + bw / 2.0) / bw;
            let v = (ly + bh / 2.0) / bh;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            let src = image.get_pixel(((u * iw) as u32).min(image.width() - 1), ((v * ih) as u32).min(image.height() - 1));
            let a = src[3] as f64 / 255.0;
            if a == 0.0 {
                continue;
            }
            let dst = frame.get_pixel_mut(px, py);
            for c in 0..3 {
                dst[c] = if a == 1.0 {
                    src[c]
                } else {
                    (a * src[c] as f64 + (1.0 - a) * dst[c] as f64).round() as u8
                };
            }
        }
    }
}

/// Composites all placements in order, later ones on top.
pub fn paste_references(first_frame: &RgbImage, references: &[ReferencePlacement], assets: &dyn AssetSource) -> Result<RgbImage> {
    let mut out = first_frame.clone();
    for placement in references {
        let img = assets
            .reference(&placement.image_ref)
            .ok_or_else(|| Error::MissingAsset(placement.image_ref.clone()))?;
        paste_reference(&mut out, placement, img);
    }
    Ok(out)
}

/// All conditioning tensors of one sample, sharing the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub noise_latent: Latent,
    pub image_latent: Latent,
    pub mask: Latent,
    pub heatmap: Latent,
    pub point_map: Latent,
}

impl ConditionBundle {
    pub fn latent_channels(&self) -> usize {
        self.image_latent.channels
    }

    /// Per-cell input width of the concatenated layout, `3C + 2`.
    pub fn total_channels(&self) -> usize {
        3 * self.latent_channels() + 2
    }

    /// Rows of concatenated channels in [`CHANNEL_LAYOUT`] order, one per
    /// latent cell, with `x` in place of the noise latent.
    pub fn concat_with(&self, x: &Latent) -> Vec<f64> {
        let c = self.latent_channels();
        let width = 3 * c + 2;
        let cells = self.image_latent.num_cells();
        let mut out = Vec::with_capacity(cells * width);
        for i in 0..cells {
            out.extend_from_slice(&x.data[i * c..(i + 1) * c]);
            out.extend_from_slice(&self.image_latent.data[i * c..(i + 1) * c]);
            out.push(self.mask.data[i]);
            out.push(self.heatmap.data[i]);
            out.extend_from_slice(&self.point_map.data[i * c..(i + 1) * c]);
        }
        out
    }

    pub fn concat(&self) -> Vec<f64> {
        self.concat_with(&self.noise_latent)
    }
}

/// Builds the conditioning bundle for a triplet: pastes references into the
/// first frame, encodes it as the frame-0 image latent and rasterizes the
/// trajectory channels.
pub fn assemble(
    triplet: &MultimodalTriplet,
    first_frame: &RgbImage,
    noise: Latent,
    grid: &LatentGrid,
    sigma: f64,
    assets: &dyn AssetSource,
) -> Result<ConditionBundle> {
    if triplet.frame_size != grid.frame_size || triplet.num_frames != grid.num_frames {
        return Err(Error::Shape(format!(
            "triplet is {:?} x {} frames, grid expects {:?} x {}",
            triplet.frame_size, triplet.num_frames, grid.frame_size, grid.num_frames
        )));
    }
    let expected = (grid.latent_frames(), grid.height(), grid.width(), LATENT_CHANNELS);
    if noise.shape() != expected {
        return Err(Error::Shape(format!("noise shape {:?}, expected {expected:?}", noise.shape())));
    }
    let pasted = paste_references(first_frame, &triplet.references, assets)?;
    let first = encode_frame(&pasted, grid.spatial_stride)?;
    if first.height != grid.height() || first.width != grid.width() {
        return Err(Error::Shape("first frame does not match the grid".into()));
    }
    let mut image_latent = Latent::for_grid(grid, LATENT_CHANNELS);
    image_latent.frame_mut(0).copy_from_slice(&first.data);
    let mut mask = Latent::for_grid(grid, 1);
    mask.frame_mut(0).iter_mut().for_each(|v| *v = 1.0);
    let heatmap = rasterize_heatmap(&triplet.tracks, grid, sigma)?;
    let point_map = build_point_map(&triplet.tracks, &first, grid)?;
    Ok(ConditionBundle {
        noise_latent: noise,
        image_latent,
        mask,
        heatmap,
        point_map,
    })
}
