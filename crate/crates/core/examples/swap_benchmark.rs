//! Two objects cross paths; does each caption follow the right trajectory?
//! Scores one checkpoint on the swap benchmark under each attention mode.
//!
//! `cargo run --release --example swap_benchmark -- <checkpoint> [cases]`

use eventcanvas::attention::AttentionMode;
use eventcanvas::eval::{evaluate, EvalOptions};
use eventcanvas::model::load_checkpoint;
use eventcanvas::synthgen::{make_swap_benchmark, SceneOptions};

fn main() -> eventcanvas::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(ckpt) = args.next() else {
        eprintln!("usage: swap_benchmark <checkpoint> [cases]");
        std::process::exit(2);
    };
    let cases = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let bench = std::env::temp_dir().join("eventcanvas-swap");
    let _ = std::fs::remove_dir_all(&bench);
    make_swap_benchmark(cases, 2002, &SceneOptions::default(), &bench)?;

    let base = load_checkpoint(ckpt.as_ref())?;
    let opts = EvalOptions { steps: 20, seed: 5, max_cases: 0 };
    for mode in [AttentionMode::Weighted, AttentionMode::Full, AttentionMode::Hard] {
        let mut model = base.clone();
        model.config.attention_mode = mode;
        let report = evaluate(&model, &bench, &opts)?;
        let correct = report.cases.iter().filter(|c| c.assignment_correct == Some(true)).count();
        println!(
            "{mode:>8}: {correct}/{} correct assignments ({} undefined), objmc {:?}",
            report.cases.len(),
            report.aggregate.undefined_counts.assignment,
            report.aggregate.objmc
        );
    }
    Ok(())
}
