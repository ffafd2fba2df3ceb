//! Samples a video for a dataset clip's triplet and first frame, then
//! writes the frames as PNGs.
//!
//! `cargo run --release --example generate_video -- [checkpoint]`
//!
//! Without a checkpoint an untrained model is used, so the output shows the
//! pipeline rather than a useful video.

use eventcanvas::model::{load_checkpoint, sample, Model, ModelConfig};
use eventcanvas::synthgen::{load_dataset, make_dataset};

fn main() -> eventcanvas::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => Model::new(ModelConfig::desk_default(), 0)?,
    };
    let root = std::env::temp_dir().join("eventcanvas-generate");
    make_dataset(1, 21, &root.join("data"))?;
    let clip = load_dataset(&root.join("data"))?.load_clip(0)?;

    let out = sample(&model, &clip.triplet, &clip.frames[0], &clip.references, 20, 7, &mut |done, total| {
        if done % 5 == 0 {
            println!("step {done}/{total}");
        }
    })?;
    let dir = root.join("frames");
    std::fs::create_dir_all(&dir)?;
    for (i, f) in out.frames.iter().enumerate() {
        f.save(dir.join(format!("{i:04}.png")))?;
    }
    println!("wrote {} frames to {}", out.frames.len(), dir.display());
    Ok(())
}
