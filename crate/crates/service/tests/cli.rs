use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn eventcanvas(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventcanvas"))
        .args(args)
        .env("CANVAS_DATA_DIR", data_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_generate_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let out = ok(&eventcanvas(&["synth", "--n", "3", "--seed", "4", "--out", s(&data)], root));
    assert!(out.contains("wrote 3 clips"));

    let cfg = json!({
        "dataset": data,
        "batch_size": 1,
        "steps": 2,
        "learning_rate": 1e-3,
        "warmup_steps": 0,
        "seed": 1,
        "architecture": { "dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2, "text_dim": 8, "spatial_stride": 8, "temporal_stride": 4 }
    });
    let cfg_path = root.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let run = root.join("run");
    ok(&eventcanvas(&["train", "--config", s(&cfg_path), "--out", s(&run), "--attention-mode", "hard"], root));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,lr,loss\n"));

    let manifest: Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let clip = data.join(manifest["clips"][0]["clip_id"].as_str().unwrap());
    let gen = |dir: &Path| {
        ok(&eventcanvas(
            &[
                "generate",
                "--checkpoint",
                s(&ckpt),
                "--triplet",
                s(&clip.join("triplet.json")),
                "--first-frame",
                s(&clip.join("frames/0000.png")),
                "--steps",
                "2",
                "--seed",
                "9",
                "--out",
                s(dir),
            ],
            root,
        ))
    };
    gen(&root.join("g1"));
    gen(&root.join("g2"));
    assert!(root.join("g1/frames/0015.png").exists());
    assert!(root.join("g1/preview.gif").exists());
    assert_eq!(std::fs::read(root.join("g1/frames.tar")).unwrap(), std::fs::read(root.join("g2/frames.tar")).unwrap());

    let report_path = root.join("report.json");
    ok(&eventcanvas(
        &["eval", "--checkpoint", s(&ckpt), "--benchmark", s(&data), "--out", s(&report_path), "--steps", "2", "--attention-mode", "full"],
        root,
    ));
    let report: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 3);
    assert!(report["aggregate"]["undefined_counts"].is_object());

    let gt_path = root.join("gt.json");
    ok(&eventcanvas(&["eval", "--ground-truth", "--benchmark", s(&data), "--out", s(&gt_path)], root));
    let gt: Value = serde_json::from_slice(&std::fs::read(&gt_path).unwrap()).unwrap();
    assert!(gt["aggregate"]["objmc"].as_f64().unwrap() <= 1.0);
    assert!(gt["aggregate"]["appearance_rate"].as_f64().unwrap() >= 0.99);
}

#[test]
fn bad_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eventcanvas(&["--attention-mode", "sideways", "synth", "--n", "1", "--out", "x"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown attention mode"));
    let out = eventcanvas(&["eval", "--benchmark", s(tmp.path()), "--out", s(&tmp.path().join("r.json"))], tmp.path());
    assert!(!out.status.success());
    let out = eventcanvas(&["eval", "--ground-truth", "--benchmark", s(&tmp.path().join("empty")), "--out", s(&tmp.path().join("r.json"))], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn swap_benchmark_from_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("swap");
    ok(&eventcanvas(&["synth", "--swap", "--n", "2", "--seed", "1", "--out", s(&dir)], tmp.path()));
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 2);
}
