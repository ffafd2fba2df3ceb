//! Spatially weighted cross-attention between video tokens and caption
//! tokens.
//!
//! Each foreground track claims a coverage rectangle per frame: its point
//! as the center and its first-frame box as the size. Video tokens inside
//! the rectangle get an additive logit bias of `ln(w)` towards the tokens of
//! the track's caption, which multiplies their unnormalized attention
//! weight by `w` while leaving every other pair untouched.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::condition::LatentGrid;
use crate::error::{ensure_arg, Error, Result};
use crate::nn::{self, Mat};
use crate::text::CaptionSpan;
use crate::triplet::{BBox, MultimodalTriplet, Point};

/// Bias strength used unless configured otherwise.
pub const DEFAULT_W: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Additive `ln(w)` bias on covered (query, caption key) pairs.
    #[default]
    Weighted,
    /// Plain cross-attention.
    Full,
    /// Covered queries may only attend to their own caption keys.
    Hard,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "full" => Ok(Self::Full),
            "hard" => Ok(Self::Hard),
            other => Err(Error::InvalidArgument(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Full => "full",
            Self::Hard => "hard",
        })
    }
}

/// Pixel rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageRegion {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

pub fn coverage_region(point: Point, bbox: &BBox) -> CoverageRegion {
    let (x, y) = (point.x as f64, point.y as f64);
    let (hw, hh) = (bbox.w as f64 / 2.0, bbox.h as f64 / 2.0);
    CoverageRegion {
        x_min: x - hw,
        y_min: y - hh,
        x_max: x + hw,
        y_max: y + hh,
    }
}

/// Video tokens of one latent frame whose cell centers fall inside the
/// region after clamping it to the frame. A region that overlaps the frame
/// but contains no cell center selects the single nearest cell.
pub fn tokens_in_region(region: &CoverageRegion, grid: &LatentGrid, latent_frame: usize) -> Vec<usize> {
    let (w, h) = (grid.frame_size.0 as f64, grid.frame_size.1 as f64);
    let x0 = region.x_min.max(0.0);
    let y0 = region.y_min.max(0.0);
    let x1 = region.x_max.min(w);
    let y1 = region.y_max.min(h);
    if !(x0 <= x1 && y0 <= y1) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            let (cx, cy) = grid.cell_center(row, col);
            if cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1 {
                out.push(grid.token_index(latent_frame, row, col));
            }
        }
    }
    if out.is_empty() {
        let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let (row, col) = grid.cell_of(mx as f32, my as f32);
        out.push(grid.token_index(latent_frame, row, col));
    }
    out
}

/// Queries covered by one track and the caption keys they are biased to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBias {
    pub track_id: String,
    pub keys: Range<usize>,
    pub queries: Vec<bool>,
}

/// Sparse form of the bias matrix: every entry is either `0` or `ln(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    pub log_w: f64,
    pub num_queries: usize,
    pub num_keys: usize,
    pub tracks: Vec<TrackBias>,
}

impl AttentionBias {
    pub fn none(num_queries: usize, num_keys: usize) -> Self {
        Self {
            log_w: 0.0,
            num_queries,
            num_keys,
            tracks: Vec::new(),
        }
    }

    pub fn value(&self, q: usize, k: usize) -> f64 {
        if self.tracks.iter().any(|t| t.keys.contains(&k) && t.queries[q]) {
            self.log_w
        } else {
            0.0
        }
    }

    pub fn is_covered(&self, q: usize) -> bool {
        self.tracks.iter().any(|t| t.queries[q])
    }

    /// Dense row-major `(num_queries, num_keys)` bias matrix.
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_queries * self.num_keys];
        for t in &self.tracks {
            for (q, _) in t.queries.iter().enumerate().filter(|(_, &c)| c) {
                for k in t.keys.clone() {
                    out[q * self.num_keys + k] = self.log_w;
                }
            }
        }
        out
    }

    /// Additive logit term for a mode, `None` when the logits are unbiased.
    pub fn logit_bias(&self, mode: AttentionMode) -> Option<Vec<f64>> {
        match mode {
            AttentionMode::Full => None,
            AttentionMode::Weighted => (self.log_w != 0.0 && !self.tracks.is_empty()).then(|| self.dense()),
            AttentionMode::Hard => {
                if self.tracks.is_empty() {
                    return None;
                }
                let nk = self.num_keys;
                let mut out = vec![0.0; self.num_queries * nk];
                for q in 0..self.num_queries {
                    if !self.is_covered(q) {
                        continue;
                    }
                    let row = &mut out[q * nk..(q + 1) * nk];
                    row.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                    for t in self.tracks.iter().filter(|t| t.queries[q]) {
                        row[t.keys.clone()].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                Some(out)
            }
        }
    }
}

/// Builds the bias for every captioned track of a triplet.
///
/// A (video token, caption token) pair is biased when the track is visible
/// at the token's sampled frame, the video token lies in the track's
/// coverage region at that frame, and the caption token is in the track's
/// span. Background tracks carry no caption and add nothing.
pub fn build_bias(triplet: &MultimodalTriplet, grid: &LatentGrid, spans: &[CaptionSpan], num_keys: usize, w: f64) -> Result<AttentionBias> {
    ensure_arg!(w > 0.0 && w.is_finite(), "bias weight must be positive, got {w}");
    let nq = grid.num_tokens();
    let mut tracks = Vec::with_capacity(spans.len());
    for span in spans {
        ensure_arg!(span.tokens.end <= num_keys && span.tokens.start < span.tokens.end, "span {:?} outside {num_keys} keys", span.tokens);
        let track = triplet
            .track(&span.track_id)
            .ok_or_else(|| Error::InvalidArgument(format!("span for unknown track {:?}", span.track_id)))?;
        let Some(bbox) = triplet.bboxes.get(&span.track_id) else {
            continue;
        };
        let mut queries = vec![false; nq];
        for k in 0..grid.latent_frames() {
            let f = grid.sample_frame(k);
            if !track.visibility.get(f).copied().unwrap_or(false) {
                continue;
            }
            for q in tokens_in_region(&coverage_region(track.points[f], bbox), grid, k) {
                queries[q] = true;
            }
        }
        tracks.push(TrackBias {
            track_id: span.track_id.clone(),
            keys: span.tokens.clone(),
            queries,
        });
    }
    Ok(AttentionBias {
        log_w: w.ln(),
        num_queries: nq,
        num_keys,
        tracks,
    })
}

/// Single-head biased cross-attention `softmax(QK^T / sqrt(D) + W) V`.
/// Returns the output and the attention weights.
pub fn sawca(q: &Mat, k: &Mat, v: &Mat, bias: &AttentionBias, mode: AttentionMode) -> Result<(Mat, Mat)> {
    if q.cols != k.cols || k.cols != v.cols || k.rows != v.rows {
        return Err(Error::Shape(format!(
            "q {}x{}, k {}x{}, v {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    if bias.num_queries != q.rows || bias.num_keys != k.rows {
        return Err(Error::Shape(format!(
            "bias is {}x{}, attention is {}x{}",
            bias.num_queries, bias.num_keys, q.rows, k.rows
        )));
    }
    let logits = bias.logit_bias(mode);
    let (out, cache) = nn::attention(q, k, v, 1, logits.as_deref());
    let weights = cache.probs.into_iter().next().expect("one head");
    Ok((out, weights))
}
