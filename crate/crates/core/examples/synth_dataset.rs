//! Renders a small synthetic dataset and summarises it.
//!
//! `cargo run --example synth_dataset -- [out_dir] [n] [seed]`

use std::path::PathBuf;

use eventcanvas::synthgen::{load_dataset, make_dataset_with, DatasetOptions};

fn main() -> eventcanvas::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("eventcanvas-synth"));
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut opts = DatasetOptions::new(n, seed);
    opts.overlay = true;
    let manifest = make_dataset_with(&opts, &out)?;
    println!("wrote {} clips to {}", manifest.clips.len(), out.display());

    let ds = load_dataset(&out)?;
    for i in 0..ds.len() {
        let clip = ds.load_clip(i)?;
        let captions: Vec<&str> = clip.triplet.captions.values().map(|c| c.text.as_str()).collect();
        println!(
            "{}  motion {:5.2}  {} tracks  {} references  {:?}",
            clip.clip_id,
            ds.manifest.clips[i].motion_score,
            clip.triplet.tracks.len(),
            clip.references.len(),
            captions
        );
    }
    Ok(())
}
