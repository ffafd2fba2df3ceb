use eventcanvas::eval::{appearance_rate, consistency, evaluate, evaluate_ground_truth, objmc, oracle_track, EvalOptions};
use eventcanvas::model::{Model, ModelConfig};
use eventcanvas::synthgen::make_dataset;
use eventcanvas::triplet::{BBox, Caption, MultimodalTriplet, Point, TrajectoryTrack};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn track(points: Vec<(f32, f32)>, vis: Vec<bool>) -> TrajectoryTrack {
    TrajectoryTrack::new("t", points.into_iter().map(|(x, y)| Point::new(x, y)).collect(), vis)
}

#[test]
fn objmc_of_a_constant_offset_is_its_norm() {
    let a = track(vec![(10.0, 10.0), (20.0, 12.0), (30.0, 18.0), (5.0, 5.0)], vec![true, true, true, false]);
    let b = track(vec![(13.0, 14.0), (23.0, 16.0), (33.0, 22.0), (60.0, 60.0)], vec![true, true, true, true]);
    // sqrt(3^2 + 4^2); the frame hidden in `a` is ignored.
    assert!((objmc(&a, &b).unwrap().unwrap() - 5.0).abs() < 1e-6);
}

#[test]
fn appearance_hand_case() {
    let v = appearance_rate(&[true, false, true, false], &[true, true, true, false]).unwrap().unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn objmc_symmetric_and_translation_invariant(
        pts in prop::collection::vec((0.0f32..60.0, 0.0f32..60.0, 0.0f32..60.0, 0.0f32..60.0, any::<bool>(), any::<bool>()), 2..12),
        dx in -20.0f32..20.0,
        dy in -20.0f32..20.0,
    ) {
        let a = track(pts.iter().map(|p| (p.0, p.1)).collect(), pts.iter().map(|p| p.4).collect());
        let b = track(pts.iter().map(|p| (p.2, p.3)).collect(), pts.iter().map(|p| p.5).collect());
        let ab = objmc(&a, &b).unwrap();
        prop_assert_eq!(ab, objmc(&b, &a).unwrap());
        let shift = |t: &TrajectoryTrack| track(t.points.iter().map(|p| (p.x + dx, p.y + dy)).collect(), t.visibility.clone());
        let moved = objmc(&shift(&a), &shift(&b)).unwrap();
        match (ab, moved) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-3),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn appearance_ignores_frames_the_reference_hides(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..20),
        flips in prop::collection::vec(any::<bool>(), 20),
    ) {
        let gen: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let reference: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let perturbed: Vec<bool> = gen.iter().zip(&reference).zip(&flips).map(|((&g, &r), &f)| if r { g } else { f }).collect();
        prop_assert_eq!(appearance_rate(&gen, &reference).unwrap(), appearance_rate(&perturbed, &reference).unwrap());
    }
}

fn solid_cells(colors: [[u8; 3]; 4]) -> RgbImage {
    RgbImage::from_fn(16, 16, |x, y| Rgb(colors[(y / 8 * 2 + x / 8) as usize]))
}

/// Feature vector of a uniformly coloured cell, written out by hand: four
/// equal quadrant means, the block mean, and a luma deviation of zero.
fn uniform_feature(c: [u8; 3]) -> Vec<f64> {
    let m: Vec<f64> = c.iter().map(|&v| 2.0 * v as f64 / 255.0 - 1.0).collect();
    let mut f = Vec::new();
    for _ in 0..5 {
        f.extend_from_slice(&m);
    }
    f.push(-1.0);
    f
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn consistency_matches_hand_cosines() {
    let bg = [40, 50, 60];
    let subj = [[200, 30, 30], [180, 90, 20], [20, 20, 220]];
    let frames: Vec<RgbImage> = subj.iter().map(|&s| solid_cells([s, bg, bg, bg])).collect();
    let masks = vec![vec![true, false, false, false]; 3];
    let c = consistency(&frames, &masks, 8).unwrap();
    let f: Vec<Vec<f64>> = subj.iter().map(|&s| uniform_feature(s)).collect();
    let expect = ((cos(&f[0], &f[1]) + 1.0) / 2.0 + (cos(&f[1], &f[2]) + 1.0) / 2.0) / 2.0;
    // The encoder's deviation of a constant block is the square root of a
    // roundoff-sized variance, about 1e-8 rather than exactly 0.
    assert!((c.subject.unwrap() - expect).abs() < 1e-7, "{} vs {expect}", c.subject.unwrap());
    assert!((c.background.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn oracle_finds_the_centre_of_a_disk() {
    let (cx, cy, r) = (20.0f64, 24.0f64, 6.0f64);
    let frame = RgbImage::from_fn(64, 64, |x, y| {
        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        if px * px + py * py <= r * r {
            Rgb([255, 0, 0])
        } else {
            Rgb([30, 30, 30])
        }
    });
    let mut t = MultimodalTriplet::new((64, 64), 2);
    t.push_foreground(
        TrajectoryTrack::new("o0", vec![Point::new(20.0, 24.0); 2], vec![true; 2]),
        BBox::new(20.0, 24.0, 12.0, 12.0),
        Caption::new("the red circle stays still", "the red circle"),
    );
    let tracked = oracle_track(&[frame.clone(), frame], &t).unwrap();
    for p in &tracked[0].points {
        assert!(((p.x as f64 - cx).powi(2) + (p.y as f64 - cy).powi(2)).sqrt() < 0.5);
    }
    assert_eq!(tracked[0].visibility, vec![true, true]);
}

#[test]
fn ground_truth_benchmark_scores_near_perfect() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(12, 8, dir.path()).unwrap();
    let report = evaluate_ground_truth(dir.path(), 8).unwrap();
    assert_eq!(report.cases.len(), 12);
    assert!(report.aggregate.objmc.unwrap() <= 1.0);
    assert!(report.aggregate.appearance_rate.unwrap() >= 0.99);
    let json: serde_json::Value = serde_json::from_slice(&report.to_json()).unwrap();
    for key in ["objmc", "appearance_rate", "subject_consistency", "background_consistency", "undefined_counts"] {
        assert!(json["aggregate"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["schema_version"], "1");
}

#[test]
fn evaluate_reports_every_case_and_checks_geometry() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(3, 2, dir.path()).unwrap();
    let mut cfg = ModelConfig::desk_default();
    cfg.dim = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.text_dim = 8;
    let model = Model::new(cfg.clone(), 0).unwrap();
    let opts = EvalOptions { steps: 2, seed: 0, max_cases: 0 };
    let report = evaluate(&model, dir.path(), &opts).unwrap();
    assert_eq!(report.cases.len(), 3);
    for c in &report.cases {
        for v in [c.appearance_rate, c.subject_consistency, c.background_consistency].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(c.objmc.is_none_or(|v| v >= 0.0));
    }

    cfg.grid = eventcanvas::condition::LatentGrid::new((32, 32), 16, 8, 4).unwrap();
    let small = Model::new(cfg, 0).unwrap();
    assert!(evaluate(&small, dir.path(), &opts).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(evaluate(&model, empty.path(), &opts).is_err());
}
