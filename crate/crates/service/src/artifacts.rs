//! Video artifacts shared by the CLI and the job worker.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;

use anyhow::{Context, Result};
use eventcanvas::model::{sample, Model};
use eventcanvas::triplet::MultimodalTriplet;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, ImageFormat, RgbImage, RgbaImage};

/// Frame delay of the animated preview.
pub const PREVIEW_FRAME_MS: u32 = 125;

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Tar archive of `0000.png`, `0001.png`, ... with fixed metadata so equal
/// frames give equal bytes.
pub fn frames_archive(frames: &[RgbImage]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (i, f) in frames.iter().enumerate() {
        let data = png_bytes(f)?;
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder.append_data(&mut header, format!("{i:04}.png"), data.as_slice())?;
    }
    Ok(builder.into_inner()?)
}

/// Reads the frames back out of [`frames_archive`] output.
pub fn read_frames_archive(bytes: &[u8]) -> Result<Vec<RgbImage>> {
    let mut archive = tar::Archive::new(bytes);
    let mut frames = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let mut data = Vec::new();
        std::io::Read::read_to_end(&mut entry, &mut data)?;
        frames.push(image::load_from_memory_with_format(&data, ImageFormat::Png)?.to_rgb8());
    }
    Ok(frames)
}

/// Looping animated GIF of the frames. Best effort: the archive is the
/// canonical result.
pub fn gif_preview(frames: &[RgbImage]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut out, 10);
        enc.set_repeat(Repeat::Infinite)?;
        for f in frames {
            let rgba = image::DynamicImage::ImageRgb8(f.clone()).to_rgba8();
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(PREVIEW_FRAME_MS, 1)))?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub frames: Vec<RgbImage>,
    pub archive: Vec<u8>,
    pub preview: Vec<u8>,
}

/// Samples a video and encodes its artifacts.
pub fn generate_video(
    model: &Model,
    triplet: &MultimodalTriplet,
    first_frame: &RgbImage,
    references: &HashMap<String, RgbaImage>,
    steps: usize,
    seed: u64,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<GeneratedVideo> {
    let out = sample(model, triplet, first_frame, references, steps, seed, progress)?;
    let archive = frames_archive(&out.frames)?;
    let preview = gif_preview(&out.frames)?;
    Ok(GeneratedVideo {
        frames: out.frames,
        archive,
        preview,
    })
}

/// Writes `frames/NNNN.png`, `frames.tar` and `preview.gif` under `dir`.
pub fn write_video(dir: &Path, video: &GeneratedVideo) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).with_context(|| format!("creating {}", frames_dir.display()))?;
    for (i, f) in video.frames.iter().enumerate() {
        std::fs::write(frames_dir.join(format!("{i:04}.png")), png_bytes(f)?)?;
    }
    std::fs::write(dir.join("frames.tar"), &video.archive)?;
    std::fs::write(dir.join("preview.gif"), &video.preview)?;
    Ok(())
}
