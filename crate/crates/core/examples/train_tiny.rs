//! Trains a tiny model for a few hundred steps and prints the loss curve.
//!
//! `cargo run --release --example train_tiny -- [steps]`

use eventcanvas::synthgen::make_dataset;
use eventcanvas::train::{train, Architecture, TrainConfig};

fn main() -> eventcanvas::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let root = std::env::temp_dir().join("eventcanvas-train-tiny");
    let data = root.join("data");
    make_dataset(64, 3, &data)?;

    let cfg = TrainConfig {
        dataset: data,
        out_dir: Some(root.join("run")),
        batch_size: 4,
        steps,
        learning_rate: 2e-3,
        warmup_steps: 20,
        architecture: Architecture {
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            text_dim: 16,
            spatial_stride: 8,
            temporal_stride: 4,
        },
        ..Default::default()
    };
    let every = (steps / 10).max(1);
    let outcome = train(&cfg, &mut |r| {
        if r.step % every == 0 || r.step == 1 {
            println!("step {:5}  lr {:.2e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    println!(
        "{} parameters; checkpoint and loss.csv in {}",
        outcome.model.params.num_parameters(),
        root.join("run").display()
    );
    Ok(())
}
