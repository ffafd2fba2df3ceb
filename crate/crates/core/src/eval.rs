//! Evaluation: a colour-centroid oracle tracker, motion and appearance
//! metrics, feature consistency and benchmark reports.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::attention::coverage_region;
use crate::condition::encode_frame;
use crate::error::{ensure_arg, Error, Result};
use crate::model::{sample, Model};
use crate::synthgen::{load_dataset, PaletteColor, MIN_VISIBLE_PIXELS};
use crate::triplet::{MultimodalTriplet, Point, TrajectoryTrack};

pub const REPORT_VERSION: &str = "1";

/// Per-channel distance under which a pixel counts as the track colour.
pub const COLOR_TOLERANCE: u8 = 60;

const CONSISTENCY_NOTE: &str = "consistency features come from the toy latent encoder; values are only comparable within this project";

/// Palette colour named by a track's caption or subject hint.
pub fn track_color(triplet: &MultimodalTriplet, track_id: &str) -> Result<PaletteColor> {
    let caption = triplet
        .captions
        .get(track_id)
        .ok_or_else(|| Error::InvalidArgument(format!("track {track_id:?} has no caption")))?;
    PaletteColor::find_in(&caption.text)
        .or_else(|| PaletteColor::find_in(&caption.subject_hint))
        .ok_or_else(|| Error::InvalidArgument(format!("caption of {track_id:?} names no palette colour")))
}

fn matches(p: &image::Rgb<u8>, c: [u8; 3]) -> bool {
    (0..3).all(|i| p.0[i].abs_diff(c[i]) <= COLOR_TOLERANCE)
}

/// Tracks every foreground track of `triplet` through `frames` by the
/// centroid of pixels matching its colour. Frames with fewer than
/// [`MIN_VISIBLE_PIXELS`] matches are invisible and repeat the last seen
/// point (or the frame centre before the first sighting).
pub fn oracle_track(frames: &[RgbImage], triplet: &MultimodalTriplet) -> Result<Vec<TrajectoryTrack>> {
    ensure_arg!(!frames.is_empty(), "no frames to track");
    let fg = triplet.foreground_sorted();
    let mut colors = Vec::with_capacity(fg.len());
    for t in &fg {
        let c = track_color(triplet, &t.track_id)?;
        if colors.contains(&c) {
            return Err(Error::InvalidArgument(format!("ambiguous colour {} shared by several tracks", c.name())));
        }
        colors.push(c);
    }
    let (w, h) = frames[0].dimensions();
    let mut out: Vec<TrajectoryTrack> = fg.iter().map(|t| TrajectoryTrack::new(t.track_id.clone(), Vec::new(), Vec::new())).collect();
    for frame in frames {
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); colors.len()];
        for (x, y, p) in frame.enumerate_pixels() {
            if let Some(i) = colors.iter().position(|c| matches(p, c.rgb())) {
                acc[i].0 += x as f64 + 0.5;
                acc[i].1 += y as f64 + 0.5;
                acc[i].2 += 1;
            }
        }
        for (track, (sx, sy, n)) in out.iter_mut().zip(acc) {
            if n >= MIN_VISIBLE_PIXELS {
                track.points.push(Point::new((sx / n as f64) as f32, (sy / n as f64) as f32));
                track.visibility.push(true);
            } else {
                let last = track.points.last().copied().unwrap_or(Point::new(w as f32 / 2.0, h as f32 / 2.0));
                track.points.push(last);
                track.visibility.push(false);
            }
        }
    }
    Ok(out)
}

/// Mean distance over frames visible in both tracks; `None` when there
/// are none.
pub fn objmc(generated: &TrajectoryTrack, reference: &TrajectoryTrack) -> Result<Option<f64>> {
    ensure_arg!(
        generated.points.len() == reference.points.len() && generated.visibility.len() == reference.visibility.len(),
        "tracks differ in length"
    );
    let (mut sum, mut n) = (0.0, 0usize);
    for f in 0..reference.points.len() {
        if generated.visibility[f] && reference.visibility[f] {
            sum += generated.points[f].dist(reference.points[f]);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Recall of reference-visible frames; `None` when the reference is
/// never visible.
pub fn appearance_rate(generated: &[bool], reference: &[bool]) -> Result<Option<f64>> {
    ensure_arg!(generated.len() == reference.len(), "visibility sequences differ in length");
    let denom = reference.iter().filter(|&&v| v).count();
    let hits = generated.iter().zip(reference).filter(|(&g, &r)| g && r).count();
    Ok((denom > 0).then(|| hits as f64 / denom as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub subject: Option<f64>,
    pub background: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn pooled(latent: &crate::condition::Latent, mask: &[bool], want: bool) -> Option<Vec<f64>> {
    let c = latent.channels;
    let mut sum = vec![0.0; c];
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m == want {
            for (s, v) in sum.iter_mut().zip(&latent.data[i * c..(i + 1) * c]) {
                *s += v;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Subject and background stability. Each frame is encoded, its cells are
/// averaged inside (subject) and outside (background) that frame's mask,
/// and consecutive pooled vectors are compared by cosine similarity
/// mapped from `[-1, 1]` to `[0, 1]`. Pairs where either side has no cells
/// are skipped; a side with no usable pair is `None`.
pub fn consistency(frames: &[RgbImage], masks: &[Vec<bool>], spatial_stride: u32) -> Result<Consistency> {
    ensure_arg!(frames.len() >= 2, "consistency needs at least two frames");
    ensure_arg!(masks.len() == frames.len(), "one mask per frame required");
    let latents = frames.iter().map(|f| encode_frame(f, spatial_stride)).collect::<Result<Vec<_>>>()?;
    for (l, m) in latents.iter().zip(masks) {
        if m.len() != l.num_cells() {
            return Err(Error::Shape(format!("mask has {} cells, frame has {}", m.len(), l.num_cells())));
        }
    }
    let side = |want: bool| {
        let feats: Vec<Option<Vec<f64>>> = latents.iter().zip(masks).map(|(l, m)| pooled(l, m, want)).collect();
        let sims: Vec<f64> = feats
            .windows(2)
            .filter_map(|w| match (&w[0], &w[1]) {
                (Some(a), Some(b)) => Some((cosine(a, b) + 1.0) / 2.0),
                _ => None,
            })
            .collect();
        (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
    };
    Ok(Consistency {
        subject: side(true),
        background: side(false),
    })
}

/// Per-frame cell masks covering the boxes of visible foreground tracks.
pub fn foreground_masks(triplet: &MultimodalTriplet, spatial_stride: u32) -> Vec<Vec<bool>> {
    let (w, h) = triplet.frame_size;
    let (wl, hl) = ((w / spatial_stride) as usize, (h / spatial_stride) as usize);
    let s = spatial_stride as f64;
    (0..triplet.num_frames)
        .map(|f| {
            let mut mask = vec![false; wl * hl];
            for t in triplet.foreground() {
                let Some(bbox) = triplet.bboxes.get(&t.track_id) else { continue };
                if !t.visibility[f] {
                    continue;
                }
                let r = coverage_region(t.points[f], bbox);
                for row in 0..hl {
                    for col in 0..wl {
                        let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                        if cx >= r.x_min && cx <= r.x_max && cy >= r.y_min && cy <= r.y_max {
                            mask[row * wl + col] = true;
                        }
                    }
                }
            }
            mask
        })
        .collect()
}

/// Whether each generated object follows its own reference path better
/// than the swapped one. Only defined for exactly two tracks.
pub fn assignment_correct(generated: &[TrajectoryTrack], reference: &[TrajectoryTrack]) -> Result<Option<bool>> {
    if generated.len() != 2 || reference.len() != 2 {
        return Ok(None);
    }
    let d = |i: usize, j: usize| objmc(&generated[i], &reference[j]);
    let (Some(a), Some(b), Some(c), Some(e)) = (d(0, 0)?, d(1, 1)?, d(0, 1)?, d(1, 0)?) else {
        return Ok(None);
    };
    Ok(Some(a + b < c + e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track_id: String,
    pub objmc: Option<f64>,
    pub appearance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    /// Some foreground track leaves the frame at some point.
    pub entry_exit: bool,
    pub objmc: Option<f64>,
    pub appearance_rate: Option<f64>,
    pub subject_consistency: Option<f64>,
    pub background_consistency: Option<f64>,
    pub assignment_correct: Option<bool>,
    pub tracks: Vec<TrackMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UndefinedCounts {
    pub objmc: usize,
    pub appearance_rate: usize,
    pub subject_consistency: usize,
    pub background_consistency: usize,
    pub assignment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub objmc: Option<f64>,
    pub appearance_rate: Option<f64>,
    pub appearance_rate_entry_exit: Option<f64>,
    pub subject_consistency: Option<f64>,
    pub background_consistency: Option<f64>,
    /// Fraction of two-track cases whose objects follow their own paths.
    pub assignment_accuracy: Option<f64>,
    pub undefined_counts: UndefinedCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub note: String,
    pub aggregate: Aggregate,
    pub cases: Vec<CaseReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), undefined)
}

fn is_entry_exit(triplet: &MultimodalTriplet) -> bool {
    triplet
        .foreground()
        .any(|t| t.points.iter().zip(&t.visibility).any(|(p, &v)| !v && !p.in_frame(triplet.frame_size)))
}

/// Scores generated `frames` against the trajectories of `triplet`.
pub fn evaluate_case(case_id: &str, frames: &[RgbImage], triplet: &MultimodalTriplet, spatial_stride: u32) -> Result<CaseReport> {
    ensure_arg!(frames.len() == triplet.num_frames, "case has {} frames, triplet {}", frames.len(), triplet.num_frames);
    let tracked = oracle_track(frames, triplet)?;
    let reference: Vec<TrajectoryTrack> = triplet.foreground_sorted().into_iter().cloned().collect();
    let mut tracks = Vec::with_capacity(reference.len());
    for (g, r) in tracked.iter().zip(&reference) {
        tracks.push(TrackMetrics {
            track_id: r.track_id.clone(),
            objmc: objmc(g, r)?,
            appearance_rate: appearance_rate(&g.visibility, &r.visibility)?,
        });
    }
    let cons = consistency(frames, &foreground_masks(triplet, spatial_stride), spatial_stride)?;
    Ok(CaseReport {
        case_id: case_id.to_owned(),
        entry_exit: is_entry_exit(triplet),
        objmc: mean_defined(tracks.iter().map(|t| t.objmc)).0,
        appearance_rate: mean_defined(tracks.iter().map(|t| t.appearance_rate)).0,
        subject_consistency: cons.subject,
        background_consistency: cons.background,
        assignment_correct: assignment_correct(&tracked, &reference)?,
        tracks,
    })
}

/// Averages case metrics, skipping undefined entries and counting them.
pub fn aggregate(cases: &[CaseReport]) -> Aggregate {
    let (objmc, u_objmc) = mean_defined(cases.iter().map(|c| c.objmc));
    let (appearance_rate, u_app) = mean_defined(cases.iter().map(|c| c.appearance_rate));
    let (appearance_rate_entry_exit, _) = mean_defined(cases.iter().filter(|c| c.entry_exit).map(|c| c.appearance_rate));
    let (subject_consistency, u_sub) = mean_defined(cases.iter().map(|c| c.subject_consistency));
    let (background_consistency, u_bg) = mean_defined(cases.iter().map(|c| c.background_consistency));
    let (assignment_accuracy, u_assign) = mean_defined(cases.iter().map(|c| c.assignment_correct.map(|b| if b { 1.0 } else { 0.0 })));
    Aggregate {
        objmc,
        appearance_rate,
        appearance_rate_entry_exit,
        subject_consistency,
        background_consistency,
        assignment_accuracy,
        undefined_counts: UndefinedCounts {
            objmc: u_objmc,
            appearance_rate: u_app,
            subject_consistency: u_sub,
            background_consistency: u_bg,
            assignment: u_assign,
        },
    }
}

pub fn report(cases: Vec<CaseReport>) -> EvalReport {
    EvalReport {
        schema_version: REPORT_VERSION.into(),
        note: CONSISTENCY_NOTE.into(),
        aggregate: aggregate(&cases),
        cases,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub steps: usize,
    pub seed: u64,
    /// Evaluate at most this many cases; 0 means all.
    pub max_cases: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            seed: 0,
            max_cases: 0,
        }
    }
}

/// Runs `f` over `0..n` on all available cores, keeping order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(workers)).enumerate() {
            let f = &f;
            let base = w * n.div_ceil(workers);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Generates every benchmark case from its first frame, trajectories,
/// captions and references, then scores it.
pub fn evaluate(model: &Model, benchmark: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ds = load_dataset(benchmark)?;
    let n = if opts.max_cases == 0 { ds.len() } else { ds.len().min(opts.max_cases) };
    let grid = model.grid();
    let cases = par_map(n, |i| {
        let clip = ds.load_clip(i)?;
        if clip.triplet.frame_size != grid.frame_size || clip.triplet.num_frames != grid.num_frames {
            return Err(Error::Shape(format!(
                "case {} is {:?} x {} frames, checkpoint expects {:?} x {}",
                clip.clip_id, clip.triplet.frame_size, clip.triplet.num_frames, grid.frame_size, grid.num_frames
            )));
        }
        let out = sample(model, &clip.triplet, &clip.frames[0], &clip.references, opts.steps, opts.seed.wrapping_add(i as u64), &mut |_, _| {})?;
        evaluate_case(&clip.clip_id, &out.frames, &clip.triplet, grid.spatial_stride)
    })?;
    Ok(report(cases))
}

/// Scores the stored benchmark videos themselves, bypassing generation.
pub fn evaluate_ground_truth(benchmark: &Path, spatial_stride: u32) -> Result<EvalReport> {
    let ds = load_dataset(benchmark)?;
    let cases = par_map(ds.len(), |i| {
        let clip = ds.load_clip(i)?;
        evaluate_case(&clip.clip_id, &clip.frames, &clip.triplet, spatial_stride)
    })?;
    Ok(report(cases))
}

/// Tracked points keyed by track id, for callers that want raw tracks.
pub fn oracle_track_map(frames: &[RgbImage], triplet: &MultimodalTriplet) -> Result<HashMap<String, TrajectoryTrack>> {
    Ok(oracle_track(frames, triplet)?.into_iter().map(|t| (t.track_id.clone(), t)).collect())
}
