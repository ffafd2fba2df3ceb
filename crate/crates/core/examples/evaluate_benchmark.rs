//! Scores a benchmark twice: its own videos, and videos sampled by a model.
//!
//! `cargo run --release --example evaluate_benchmark -- [checkpoint]`

use eventcanvas::eval::{evaluate, evaluate_ground_truth, EvalOptions};
use eventcanvas::model::{load_checkpoint, Model, ModelConfig};
use eventcanvas::synthgen::make_dataset;

fn main() -> eventcanvas::Result<()> {
    let bench = std::env::temp_dir().join("eventcanvas-bench");
    make_dataset(10, 1001, &bench)?;

    let truth = evaluate_ground_truth(&bench, 8)?;
    println!("ground truth: {:?}", truth.aggregate);

    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => Model::new(ModelConfig::desk_default(), 0)?,
    };
    let report = evaluate(&model, &bench, &EvalOptions { steps: 10, seed: 0, max_cases: 0 })?;
    for case in &report.cases {
        println!("{}  objmc {:?}  appearance {:?}  entry/exit {}", case.case_id, case.objmc, case.appearance_rate, case.entry_exit);
    }
    println!("{}", String::from_utf8_lossy(&report.to_json()).lines().take(20).collect::<Vec<_>>().join("\n"));
    Ok(())
}
