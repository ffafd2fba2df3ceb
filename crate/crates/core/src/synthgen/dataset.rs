//! On-disk datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<clip_id>/frames/0000.png ...
//! <root>/<clip_id>/triplet.json
//! <root>/<clip_id>/refs/<k>.png
//! <root>/<clip_id>/overlay/0000.png ...   (optional)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use image::{RgbImage, RgbaImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{extract_reference, render_trajectory_overlay, Affine};
use super::scene::{random_scene, swap_scene, SceneOptions};
use super::{render_scene, ClipRecord, DEFAULT_MOTION_THRESHOLD};
use crate::error::{ensure_arg, Error, Result};
use crate::triplet::{emit_triplet, parse_triplet, BBox, MultimodalTriplet};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub motion_score: f64,
    pub num_frames: usize,
    pub frame_size: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub n: usize,
    pub seed: u64,
    pub threshold: f64,
    pub overlay: bool,
    pub scene: SceneOptions,
    /// Candidates tried per requested clip before giving up.
    pub max_attempts_per_clip: usize,
}

impl DatasetOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            threshold: DEFAULT_MOTION_THRESHOLD,
            overlay: false,
            scene: SceneOptions::default(),
            max_attempts_per_clip: 20,
        }
    }
}

/// Renders candidate `index` of a dataset seeded with `seed`. Each index
/// has its own random stream.
pub fn candidate_clip(seed: u64, index: u64, scene: &SceneOptions) -> Option<ClipRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let spec = random_scene(&mut rng, scene, seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    render_scene(&spec).ok()
}

/// Cuts one reference image per object from the first frame where its box
/// lies fully inside the frame, and places it over the object's first-frame
/// position.
fn attach_references(clip: &mut ClipRecord) -> Result<Vec<RgbaImage>> {
    let (w, h) = clip.triplet.frame_size;
    let mut images = Vec::new();
    let fg: Vec<(String, BBox)> = clip
        .triplet
        .foreground_sorted()
        .iter()
        .map(|t| (t.track_id.clone(), clip.triplet.bboxes[&t.track_id]))
        .collect();
    for (id, bbox) in fg {
        let track = clip.triplet.track(&id).unwrap();
        let src = (0..track.points.len()).find(|&f| {
            let p = track.points[f];
            let b = BBox::new(p.x.round(), p.y.round(), bbox.w, bbox.h);
            track.visibility[f] && b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= w as f32 && b.y_max() <= h as f32
        });
        let Some(f) = src else { continue };
        let p = track.points[f];
        let crop_box = BBox::new(p.x.round(), p.y.round(), bbox.w, bbox.h);
        let (img, mut placement) = extract_reference(&clip.frames[f], &crop_box, &Affine::identity())?;
        placement.target_bbox.cx = bbox.cx;
        placement.target_bbox.cy = bbox.cy;
        placement.image_ref = format!("refs/{}.png", images.len());
        placement.track_id = Some(id);
        clip.triplet.references.push(placement);
        images.push(img);
    }
    Ok(images)
}

fn write_frames(dir: &FsPath, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

/// Writes one clip with its references and returns its manifest entry.
fn write_clip(out_dir: &FsPath, clip_id: &str, clip: &mut ClipRecord, overlay: bool) -> Result<ClipEntry> {
    let dir = out_dir.join(clip_id);
    let refs = attach_references(clip)?;
    write_frames(&dir.join("frames"), &clip.frames)?;
    fs::write(dir.join("triplet.json"), emit_triplet(&clip.triplet))?;
    fs::create_dir_all(dir.join("refs"))?;
    for (k, img) in refs.iter().enumerate() {
        img.save(dir.join("refs").join(format!("{k}.png")))?;
    }
    if overlay {
        write_frames(&dir.join("overlay"), &render_trajectory_overlay(clip))?;
    }
    Ok(ClipEntry {
        clip_id: clip_id.to_owned(),
        motion_score: clip.motion_score,
        num_frames: clip.triplet.num_frames,
        frame_size: [clip.triplet.frame_size.0, clip.triplet.frame_size.1],
    })
}

fn write_manifest(out_dir: &FsPath, clips: Vec<ClipEntry>) -> Result<Manifest> {
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION.into(),
        clips,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Writes `n` two-agent crossing clips (see [`swap_scene`]) in dataset
/// layout, without motion filtering.
pub fn make_swap_benchmark(n: usize, seed: u64, scene: &SceneOptions, out_dir: &FsPath) -> Result<Manifest> {
    ensure_arg!(n >= 1, "n must be >= 1");
    fs::create_dir_all(out_dir)?;
    let mut clips = Vec::with_capacity(n);
    for idx in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx);
        let spec = swap_scene(&mut rng, scene, seed.wrapping_add(idx));
        let mut clip = render_scene(&spec)?;
        clips.push(write_clip(out_dir, &format!("swap_{idx:05}"), &mut clip, false)?);
    }
    write_manifest(out_dir, clips)
}

/// Generates `n` clips with the default options.
pub fn make_dataset(n: usize, seed: u64, out_dir: &FsPath) -> Result<Manifest> {
    make_dataset_with(&DatasetOptions::new(n, seed), out_dir)
}

/// Renders candidates in index order, keeps those whose motion score
/// reaches the threshold and writes the first `n` of them.
pub fn make_dataset_with(opts: &DatasetOptions, out_dir: &FsPath) -> Result<Manifest> {
    ensure_arg!(opts.n >= 1, "n must be >= 1");
    ensure_arg!(opts.threshold >= 0.0, "threshold must be >= 0");
    fs::create_dir_all(out_dir)?;
    let mut clips = Vec::with_capacity(opts.n);
    let budget = (opts.n * opts.max_attempts_per_clip.max(1)) as u64;
    let mut index = 0u64;
    while clips.len() < opts.n && index < budget {
        let idx = index;
        index += 1;
        let Some(mut clip) = candidate_clip(opts.seed, idx, &opts.scene) else { continue };
        if clip.motion_score < opts.threshold {
            continue;
        }
        clips.push(write_clip(out_dir, &format!("clip_{idx:05}"), &mut clip, opts.overlay)?);
    }
    if clips.is_empty() {
        return Err(Error::Dataset("dataset empty after filtering".into()));
    }
    if clips.len() < opts.n {
        return Err(Error::Dataset(format!("only {} of {} clips passed the motion filter", clips.len(), opts.n)));
    }
    write_manifest(out_dir, clips)
}

/// A dataset directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One clip read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub clip_id: String,
    pub frames: Vec<RgbImage>,
    pub triplet: MultimodalTriplet,
    /// Reference images keyed by their `image_ref`.
    pub references: HashMap<String, RgbaImage>,
}

pub fn load_dataset(root: &FsPath) -> Result<Dataset> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(Error::SchemaVersion(manifest.schema_version));
    }
    if manifest.clips.is_empty() {
        return Err(Error::Dataset(format!("{} lists no clips", path.display())));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.clips.is_empty()
    }

    pub fn load_clip(&self, index: usize) -> Result<LoadedClip> {
        let entry = self
            .manifest
            .clips
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("clip index {index} out of range")))?;
        let dir = self.root.join(&entry.clip_id);
        let triplet = parse_triplet(&fs::read(dir.join("triplet.json"))?)?;
        let frames = (0..triplet.num_frames)
            .map(|i| Ok(image::open(dir.join("frames").join(format!("{i:04}.png")))?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        let mut references = HashMap::new();
        for r in &triplet.references {
            let img = image::open(dir.join(&r.image_ref))?.to_rgba8();
            references.insert(r.image_ref.clone(), img);
        }
        Ok(LoadedClip {
            clip_id: entry.clip_id.clone(),
            frames,
            triplet,
            references,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_clips_and_determinism() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = make_dataset(10, 42, a.path()).unwrap();
        make_dataset(10, 42, b.path()).unwrap();
        assert_eq!(ma.clips.len(), 10);
        assert_eq!(fs::read(a.path().join("manifest.json")).unwrap(), fs::read(b.path().join("manifest.json")).unwrap());
        let dirs = fs::read_dir(a.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(dirs, 10);
        assert!(ma.clips.iter().all(|c| c.motion_score >= DEFAULT_MOTION_THRESHOLD));
        let ds = load_dataset(a.path()).unwrap();
        let clip = ds.load_clip(3).unwrap();
        assert_eq!(clip.frames.len(), 16);
        assert_eq!(clip.references.len(), clip.triplet.references.len());
        let id = &ma.clips[3].clip_id;
        assert_eq!(fs::read(a.path().join(id).join("triplet.json")).unwrap(), fs::read(b.path().join(id).join("triplet.json")).unwrap());
    }

    #[test]
    fn impossible_threshold_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = DatasetOptions::new(2, 1);
        opts.threshold = 1e9;
        opts.max_attempts_per_clip = 3;
        let err = make_dataset_with(&opts, dir.path()).unwrap_err();
        assert!(err.to_string().contains("dataset empty after filtering"));
    }

    #[test]
    fn swap_cases_start_off_screen() {
        let dir = tempfile::tempdir().unwrap();
        make_swap_benchmark(4, 3, &SceneOptions::default(), dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for i in 0..4 {
            let clip = ds.load_clip(i).unwrap();
            let fg = clip.triplet.foreground_sorted();
            assert_eq!(fg.len(), 2);
            assert!(fg.iter().all(|t| !t.visibility[0] && t.visibility[15]));
            assert!(clip.triplet.references.is_empty() || clip.triplet.references.iter().all(|r| r.track_id.is_some()));
        }
    }

    #[test]
    fn overlay_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = DatasetOptions::new(1, 5);
        opts.overlay = true;
        let m = make_dataset_with(&opts, dir.path()).unwrap();
        assert!(dir.path().join(&m.clips[0].clip_id).join("overlay/0015.png").exists());
    }
}
