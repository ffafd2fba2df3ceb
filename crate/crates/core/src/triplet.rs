//! Multimodal triplet data model: per-agent trajectory, first-frame box and
//! motion caption, plus reference-image placements on the first frame.
//!
//! Coordinates are pixels at native frame resolution with the origin at the
//! top-left corner, x to the right and y downwards. A point is in frame when
//! it lies in the closed rectangle `[0, w] x [0, h]`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f32; 2]", into = "[f32; 2]")]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn in_frame(self, frame_size: (u32, u32)) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x <= frame_size.0 as f32
            && self.y <= frame_size.1 as f32
    }
}

impl From<[f32; 2]> for Point {
    fn from(v: [f32; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// One tracked point over all frames of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrack {
    pub track_id: String,
    pub is_background: bool,
    pub points: Vec<Point>,
    pub visibility: Vec<bool>,
}

impl TrajectoryTrack {
    pub fn new(track_id: impl Into<String>, points: Vec<Point>, visibility: Vec<bool>) -> Self {
        Self {
            track_id: track_id.into(),
            is_background: false,
            points,
            visibility,
        }
    }

    pub fn background(track_id: impl Into<String>, points: Vec<Point>, visibility: Vec<bool>) -> Self {
        Self {
            is_background: true,
            ..Self::new(track_id, points, visibility)
        }
    }

    pub fn num_frames(&self) -> usize {
        self.points.len()
    }

    pub fn first_visible(&self) -> Option<usize> {
        self.visibility.iter().position(|&v| v)
    }

    /// Visible and inside the frame at `frame`.
    pub fn visible_in_frame(&self, frame: usize, frame_size: (u32, u32)) -> bool {
        self.visibility.get(frame).copied().unwrap_or(false)
            && self.points[frame].in_frame(frame_size)
    }
}

/// Axis-aligned box given by center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x_min(&self) -> f32 {
        self.cx - self.w / 2.0
    }

    pub fn y_min(&self) -> f32 {
        self.cy - self.h / 2.0
    }

    pub fn x_max(&self) -> f32 {
        self.cx + self.w / 2.0
    }

    pub fn y_max(&self) -> f32 {
        self.cy + self.h / 2.0
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Overlap with the open interior of the frame rectangle.
    pub fn intersects_frame(&self, frame_size: (u32, u32)) -> bool {
        self.x_max() > 0.0
            && self.y_max() > 0.0
            && self.x_min() < frame_size.0 as f32
            && self.y_min() < frame_size.1 as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub subject_hint: String,
}

impl Caption {
    pub fn new(text: impl Into<String>, subject_hint: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            subject_hint: subject_hint.into(),
        }
    }
}

/// A reference image placed on the first-frame canvas.
///
/// `track_id` optionally binds the placement to the track that animates it;
/// an unbound placement has to overlap the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePlacement {
    pub image_ref: String,
    pub target_bbox: BBox,
    pub rotation: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalTriplet {
    pub frame_size: (u32, u32),
    pub num_frames: usize,
    pub tracks: Vec<TrajectoryTrack>,
    pub bboxes: BTreeMap<String, BBox>,
    pub captions: BTreeMap<String, Caption>,
    pub references: Vec<ReferencePlacement>,
}

impl MultimodalTriplet {
    pub fn new(frame_size: (u32, u32), num_frames: usize) -> Self {
        Self {
            frame_size,
            num_frames,
            tracks: Vec::new(),
            bboxes: BTreeMap::new(),
            captions: BTreeMap::new(),
            references: Vec::new(),
        }
    }

    /// Adds a foreground track together with its box and caption.
    pub fn push_foreground(&mut self, track: TrajectoryTrack, bbox: BBox, caption: Caption) {
        self.bboxes.insert(track.track_id.clone(), bbox);
        self.captions.insert(track.track_id.clone(), caption);
        self.tracks.push(track);
    }

    pub fn track(&self, track_id: &str) -> Option<&TrajectoryTrack> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn foreground(&self) -> impl Iterator<Item = &TrajectoryTrack> {
        self.tracks.iter().filter(|t| !t.is_background)
    }

    /// Foreground tracks in canonical (track id) order, the order used to lay
    /// out the concatenated prompt.
    pub fn foreground_sorted(&self) -> Vec<&TrajectoryTrack> {
        let mut fg: Vec<_> = self.foreground().collect();
        fg.sort_by(|a, b| a.track_id.cmp(&b.track_id));
        fg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    InvalidFrameSize,
    TooFewFrames,
    LengthMismatch,
    NonBinaryVisibility,
    NonFiniteCoordinate,
    VisibleOutsideFrame,
    DuplicateTrackId,
    MissingBbox,
    MissingCaption,
    UnexpectedBbox,
    UnexpectedCaption,
    UnknownTrack,
    InvalidBbox,
    EmptyCaption,
    UnreachableReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub track_id: Option<String>,
    pub path: String,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, track_id: Option<&str>, path: String, kind: ViolationKind, message: String) {
        self.violations.push(Violation {
            track_id: track_id.map(str::to_owned),
            path,
            kind,
            message,
        });
    }
}

/// Checks every triplet invariant and reports all violations. Never fails.
pub fn validate_triplet(triplet: &MultimodalTriplet) -> ValidationReport {
    use ViolationKind::*;
    let mut report = ValidationReport::default();
    let (w, h) = triplet.frame_size;
    let t = triplet.num_frames;
    if w == 0 || h == 0 {
        report.push(None, "frame_size".into(), InvalidFrameSize, format!("frame size {w}x{h} is empty"));
    }
    if t < 2 {
        report.push(None, "num_frames".into(), TooFewFrames, format!("num_frames {t} < 2"));
    }

    let mut seen = BTreeSet::new();
    for (i, track) in triplet.tracks.iter().enumerate() {
        let id = Some(track.track_id.as_str());
        let base = format!("tracks[{i}]");
        if !seen.insert(track.track_id.as_str()) {
            report.push(id, format!("{base}.track_id"), DuplicateTrackId, format!("track id {:?} repeated", track.track_id));
        }
        if track.points.len() != t || track.visibility.len() != t {
            report.push(
                id,
                format!("{base}.points"),
                LengthMismatch,
                format!(
                    "points has {} entries and visibility {} entries, expected {t}",
                    track.points.len(),
                    track.visibility.len()
                ),
            );
        }
        for (f, (p, &v)) in track.points.iter().zip(&track.visibility).enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                report.push(id, format!("{base}.points[{f}]"), NonFiniteCoordinate, "coordinate is not finite".into());
            } else if v && !p.in_frame(triplet.frame_size) {
                report.push(
                    id,
                    format!("{base}.points[{f}]"),
                    VisibleOutsideFrame,
                    format!("point ({}, {}) is outside the frame but marked visible", p.x, p.y),
                );
            }
        }

        let has_bbox = triplet.bboxes.contains_key(&track.track_id);
        let caption = triplet.captions.get(&track.track_id);
        if track.is_background {
            if has_bbox {
                report.push(id, format!("bboxes.{}", track.track_id), UnexpectedBbox, "background track has a bbox".into());
            }
            if caption.is_some() {
                report.push(id, format!("captions.{}", track.track_id), UnexpectedCaption, "background track has a caption".into());
            }
        } else {
            if !has_bbox {
                report.push(id, format!("bboxes.{}", track.track_id), MissingBbox, "foreground track has no bbox".into());
            }
            match caption {
                None => report.push(id, format!("captions.{}", track.track_id), MissingCaption, "foreground track has no caption".into()),
                Some(c) if c.text.trim().is_empty() => {
                    report.push(id, format!("captions.{}.text", track.track_id), EmptyCaption, "caption text is empty".into())
                }
                Some(_) => {}
            }
        }
    }

    for (id, bbox) in &triplet.bboxes {
        if !seen.contains(id.as_str()) {
            report.push(Some(id), format!("bboxes.{id}"), UnknownTrack, "bbox refers to an unknown track".into());
        }
        if !bbox.is_valid() {
            report.push(Some(id), format!("bboxes.{id}"), InvalidBbox, format!("bbox {}x{} must have positive size", bbox.w, bbox.h));
        }
    }
    for id in triplet.captions.keys() {
        if !seen.contains(id.as_str()) {
            report.push(Some(id), format!("captions.{id}"), UnknownTrack, "caption refers to an unknown track".into());
        }
    }

    for (k, r) in triplet.references.iter().enumerate() {
        let path = format!("references[{k}]");
        if !r.target_bbox.is_valid() {
            report.push(r.track_id.as_deref(), format!("{path}.target_bbox"), InvalidBbox, "reference bbox must have positive size".into());
            continue;
        }
        if r.target_bbox.intersects_frame(triplet.frame_size) {
            continue;
        }
        let entering = r
            .track_id
            .as_deref()
            .and_then(|id| triplet.track(id))
            .and_then(TrajectoryTrack::first_visible)
            .is_some_and(|f| f > 0);
        if !entering {
            report.push(
                r.track_id.as_deref(),
                format!("{path}.target_bbox"),
                UnreachableReference,
                "off-frame reference must be bound to a track that enters later".into(),
            );
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct WireTrack {
    track_id: String,
    is_background: bool,
    points: Vec<Point>,
    visibility: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct WireTriplet {
    schema_version: String,
    frame_size: [u32; 2],
    num_frames: usize,
    tracks: Vec<WireTrack>,
    bboxes: BTreeMap<String, BBox>,
    captions: BTreeMap<String, Caption>,
    references: Vec<ReferencePlacement>,
}

/// Parses the triplet JSON document and validates it.
pub fn parse_triplet(bytes: &[u8]) -> Result<MultimodalTriplet> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: String,
    }
    let version: Version = serde_json::from_slice(bytes)?;
    if version.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion(version.schema_version));
    }
    let wire: WireTriplet = serde_json::from_slice(bytes)?;

    let mut report = ValidationReport::default();
    let tracks = wire
        .tracks
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            for (f, &v) in t.visibility.iter().enumerate() {
                if v > 1 {
                    report.push(
                        Some(&t.track_id),
                        format!("tracks[{i}].visibility[{f}]"),
                        ViolationKind::NonBinaryVisibility,
                        format!("visibility {v} is not 0 or 1"),
                    );
                }
            }
            TrajectoryTrack {
                track_id: t.track_id,
                is_background: t.is_background,
                points: t.points,
                visibility: t.visibility.into_iter().map(|v| v == 1).collect(),
            }
        })
        .collect();
    let triplet = MultimodalTriplet {
        frame_size: (wire.frame_size[0], wire.frame_size[1]),
        num_frames: wire.num_frames,
        tracks,
        bboxes: wire.bboxes,
        captions: wire.captions,
        references: wire.references,
    };
    report.violations.extend(validate_triplet(&triplet).violations);
    if report.is_empty() {
        Ok(triplet)
    } else {
        Err(Error::Invalid(report))
    }
}

/// Serializes a triplet as pretty-printed JSON. Output is deterministic.
pub fn emit_triplet(triplet: &MultimodalTriplet) -> Vec<u8> {
    let wire = WireTriplet {
        schema_version: SCHEMA_VERSION.to_owned(),
        frame_size: [triplet.frame_size.0, triplet.frame_size.1],
        num_frames: triplet.num_frames,
        tracks: triplet
            .tracks
            .iter()
            .map(|t| WireTrack {
                track_id: t.track_id.clone(),
                is_background: t.is_background,
                points: t.points.clone(),
                visibility: t.visibility.iter().map(|&v| v as u8).collect(),
            })
            .collect(),
        bboxes: triplet.bboxes.clone(),
        captions: triplet.captions.clone(),
        references: triplet.references.clone(),
    };
    serde_json::to_vec_pretty(&wire).expect("triplet serialization is infallible")
}

/// Turns a user-drawn point sequence into a dense per-frame track.
///
/// Consecutive user points are separated by equal time intervals spanning
/// `[start_frame, end_frame]`, so sparser points move faster. Frames before
/// the window hold the first point and frames after it hold the last one.
/// All frames are visible; see [`resample_track_with_visibility`] to set
/// flags outside the window.
pub fn resample_track(
    track_id: impl Into<String>,
    user_points: &[Point],
    start_frame: usize,
    end_frame: usize,
    num_frames: usize,
) -> Result<TrajectoryTrack> {
    resample_track_with_visibility(track_id, user_points, start_frame, end_frame, num_frames, None)
}

/// Like [`resample_track`], taking explicit per-frame visibility flags that
/// apply outside `[start_frame, end_frame]`. Inside the window every frame
/// is visible.
pub fn resample_track_with_visibility(
    track_id: impl Into<String>,
    user_points: &[Point],
    start_frame: usize,
    end_frame: usize,
    num_frames: usize,
    outside_visibility: Option<&[bool]>,
) -> Result<TrajectoryTrack> {
    ensure_arg!(user_points.len() >= 2, "need at least 2 user points, got {}", user_points.len());
    ensure_arg!(
        start_frame < end_frame && end_frame < num_frames,
        "require start < end < T, got start {start_frame}, end {end_frame}, T {num_frames}"
    );
    if let Some(flags) = outside_visibility {
        ensure_arg!(flags.len() == num_frames, "visibility flags have {} entries, expected {num_frames}", flags.len());
    }

    let segments = (user_points.len() - 1) as f64;
    let span = (end_frame - start_frame) as f64;
    let points = (0..num_frames)
        .map(|f| {
            let f = f.clamp(start_frame, end_frame);
            // Position along the user polyline in units of "point index".
            let u = (f - start_frame) as f64 / span * segments;
            let i = (u.floor() as usize).min(user_points.len() - 2);
            let frac = u - i as f64;
            let (a, b) = (user_points[i], user_points[i + 1]);
            Point::new(
                (a.x as f64 + frac * (b.x as f64 - a.x as f64)) as f32,
                (a.y as f64 + frac * (b.y as f64 - a.y as f64)) as f32,
            )
        })
        .collect();
    let visibility = (0..num_frames)
        .map(|f| {
            if (start_frame..=end_frame).contains(&f) {
                true
            } else {
                outside_visibility.is_none_or(|flags| flags[f])
            }
        })
        .collect();
    Ok(TrajectoryTrack::new(track_id, points, visibility))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_track(id: &str, t: usize) -> TrajectoryTrack {
        TrajectoryTrack::new(
            id,
            (0..t).map(|i| Point::new(2.0 + i as f32, 10.0)).collect(),
            vec![true; t],
        )
    }

    fn two_track_triplet() -> MultimodalTriplet {
        let mut tr = MultimodalTriplet::new((64, 64), 16);
        tr.push_foreground(
            line_track("a", 16),
            BBox::new(2.0, 10.0, 8.0, 8.0),
            Caption::new("the red circle moves right", "the red circle"),
        );
        tr.tracks.push(TrajectoryTrack::background(
            "bg0",
            vec![Point::new(40.0, 40.0); 16],
            vec![true; 16],
        ));
        tr
    }

    #[test]
    fn well_formed_triplet_has_empty_report() {
        assert!(validate_triplet(&two_track_triplet()).is_empty());
    }

    #[test]
    fn length_mismatch_is_reported_once() {
        let mut tr = two_track_triplet();
        tr.tracks[0].visibility.pop();
        let report = validate_triplet(&tr);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::LengthMismatch);
        assert_eq!(report.violations[0].track_id.as_deref(), Some("a"));
    }

    #[test]
    fn missing_caption_is_reported() {
        let mut tr = two_track_triplet();
        tr.captions.clear();
        let report = validate_triplet(&tr);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::MissingCaption);
    }

    #[test]
    fn background_with_caption_and_visible_offscreen_points() {
        let mut tr = two_track_triplet();
        tr.captions.insert("bg0".into(), Caption::new("x", "x"));
        tr.tracks[0].points[3] = Point::new(-1.0, 5.0);
        let report = validate_triplet(&tr);
        assert_eq!(report.count(ViolationKind::UnexpectedCaption), 1);
        assert_eq!(report.count(ViolationKind::VisibleOutsideFrame), 1);
        tr.tracks[0].visibility[3] = false;
        assert_eq!(validate_triplet(&tr).count(ViolationKind::VisibleOutsideFrame), 0);
    }

    #[test]
    fn offscreen_reference_needs_an_entering_track() {
        let mut tr = two_track_triplet();
        tr.references.push(ReferencePlacement {
            image_ref: "asset".into(),
            target_bbox: BBox::new(-20.0, 10.0, 8.0, 8.0),
            rotation: 0.0,
            track_id: Some("a".into()),
        });
        assert_eq!(validate_triplet(&tr).count(ViolationKind::UnreachableReference), 1);
        tr.tracks[0].visibility[0] = false;
        tr.tracks[0].visibility[1] = false;
        assert!(validate_triplet(&tr).is_empty());
    }

    #[test]
    fn emit_parse_round_trip() {
        let mut tr = two_track_triplet();
        tr.tracks[0].points[1] = Point::new(0.1, 1.0 / 3.0);
        let bytes = emit_triplet(&tr);
        let back = parse_triplet(&bytes).unwrap();
        assert_eq!(back, tr);
        assert_eq!(emit_triplet(&back), bytes);
    }

    #[test]
    fn parse_rejects_unknown_version() {
        let bytes = emit_triplet(&two_track_triplet());
        let text = String::from_utf8(bytes).unwrap().replace("\"schema_version\": \"1\"", "\"schema_version\": \"99\"");
        assert!(matches!(parse_triplet(text.as_bytes()), Err(Error::SchemaVersion(v)) if v == "99"));
    }

    #[test]
    fn parse_rejects_fractional_visibility() {
        let mut v: serde_json::Value = serde_json::from_slice(&emit_triplet(&two_track_triplet())).unwrap();
        v["tracks"][0]["visibility"][2] = serde_json::json!(0.5);
        assert!(parse_triplet(&serde_json::to_vec(&v).unwrap()).is_err());
        v["tracks"][0]["visibility"][2] = serde_json::json!(2);
        match parse_triplet(&serde_json::to_vec(&v).unwrap()) {
            Err(Error::Invalid(r)) => assert_eq!(r.count(ViolationKind::NonBinaryVisibility), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_malformed_json() {
        assert!(matches!(parse_triplet(b"{\"schema_version\": \"1\""), Err(Error::Json(_))));
    }

    #[test]
    fn resample_unit_speed() {
        let tr = resample_track("a", &[Point::new(0.0, 0.0), Point::new(10.0, 0.0)], 0, 10, 11).unwrap();
        for (t, p) in tr.points.iter().enumerate() {
            assert_eq!(*p, Point::new(t as f32, 0.0));
        }
        assert!(tr.visibility.iter().all(|&v| v));
    }

    #[test]
    fn resample_compressed_window_doubles_speed() {
        let tr = resample_track("a", &[Point::new(0.0, 0.0), Point::new(10.0, 0.0)], 5, 10, 16).unwrap();
        let xs: Vec<f32> = tr.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn resample_static_and_multi_point() {
        let tr = resample_track("a", &[Point::new(5.0, 5.0), Point::new(5.0, 5.0)], 0, 3, 8).unwrap();
        assert!(tr.points.iter().all(|&p| p == Point::new(5.0, 5.0)));

        // Three points over four frames: the second segment is covered in the
        // same time as the first, so the long segment moves faster.
        let pts = [Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(10.0, 0.0)];
        let tr = resample_track("a", &pts, 0, 4, 5).unwrap();
        let xs: Vec<f32> = tr.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 6.0, 10.0]);
    }

    #[test]
    fn resample_outside_flags() {
        let flags = vec![false; 8];
        let tr = resample_track_with_visibility("a", &[Point::new(0.0, 0.0), Point::new(4.0, 0.0)], 2, 5, 8, Some(&flags)).unwrap();
        assert_eq!(tr.visibility, vec![false, false, true, true, true, true, false, false]);
    }

    #[test]
    fn resample_rejects_bad_window() {
        let pts = [Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        assert!(resample_track("a", &pts, 3, 3, 8).is_err());
        assert!(resample_track("a", &pts, 0, 8, 8).is_err());
        assert!(resample_track("a", &pts[..1], 0, 3, 8).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn points() -> impl Strategy<Value = Vec<Point>> {
            prop::collection::vec((-100i32..100, -100i32..100), 2..12)
                .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x as f32, y as f32)).collect())
        }

        proptest! {
            #[test]
            fn resample_length_is_always_t(pts in points(), t in 3usize..40, a in 0usize..20, len in 1usize..20) {
                let start = a.min(t - 2);
                let end = (start + len).min(t - 1);
                let tr = resample_track("x", &pts, start, end, t).unwrap();
                prop_assert_eq!(tr.points.len(), t);
                prop_assert_eq!(tr.visibility.len(), t);
            }

            #[test]
            fn resample_is_translation_equivariant(pts in points(), dx in -50i32..50, dy in -50i32..50) {
                let shifted: Vec<Point> = pts.iter().map(|p| Point::new(p.x + dx as f32, p.y + dy as f32)).collect();
                let a = resample_track("x", &pts, 1, 13, 16).unwrap();
                let b = resample_track("x", &shifted, 1, 13, 16).unwrap();
                for (p, q) in a.points.iter().zip(&b.points) {
                    prop_assert!((p.x + dx as f32 - q.x).abs() <= 1e-4);
                    prop_assert!((p.y + dy as f32 - q.y).abs() <= 1e-4);
                }
            }

            #[test]
            fn json_round_trip_is_identity(xs in prop::collection::vec((-50.0f32..120.0, -50.0f32..120.0), 4),
                                           vis in prop::collection::vec(any::<bool>(), 4)) {
                let mut tr = MultimodalTriplet::new((64, 48), 4);
                let points: Vec<Point> = xs.iter().map(|&(x, y)| Point::new(x, y)).collect();
                let visibility: Vec<bool> = points.iter().zip(&vis).map(|(p, &v)| v && p.in_frame((64, 48))).collect();
                tr.push_foreground(
                    TrajectoryTrack::new("t0", points, visibility),
                    BBox::new(xs[0].0, xs[0].1, 3.5, 7.25),
                    Caption::new("the cyan square moves left", "the cyan square"),
                );
                let bytes = emit_triplet(&tr);
                let back = parse_triplet(&bytes).unwrap();
                prop_assert_eq!(&back, &tr);
                prop_assert_eq!(emit_triplet(&back), bytes);
            }
        }
    }
}
