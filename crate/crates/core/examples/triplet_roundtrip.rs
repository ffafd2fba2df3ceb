//! Builds a triplet by hand, validates it, and round-trips it through JSON.

use eventcanvas::triplet::{emit_triplet, parse_triplet, validate_triplet, BBox, Caption, MultimodalTriplet, Point, TrajectoryTrack};

fn main() -> eventcanvas::Result<()> {
    let n = 16;
    let mut t = MultimodalTriplet::new((64, 64), n);
    // Enters from the left edge after a few frames.
    let points: Vec<Point> = (0..n).map(|f| Point::new(-8.0 + 5.0 * f as f32, 20.0)).collect();
    let visibility = points.iter().map(|p| p.in_frame((64, 64))).collect();
    t.push_foreground(
        TrajectoryTrack::new("o0", points, visibility),
        BBox::new(-8.0, 20.0, 10.0, 10.0),
        Caption::new("the red square moves right", "red square"),
    );

    let report = validate_triplet(&t);
    println!("valid: {}", report.is_empty());

    let bytes = emit_triplet(&t);
    println!("{}", String::from_utf8_lossy(&bytes));
    let back = parse_triplet(&bytes)?;
    assert_eq!(emit_triplet(&back), bytes);
    println!("round trip is byte-stable ({} bytes)", bytes.len());

    // A broken copy: one visibility flag too few.
    let mut broken = t.clone();
    broken.tracks[0].visibility.pop();
    for v in validate_triplet(&broken).violations {
        println!("violation {:?} at {}: {}", v.kind, v.path, v.message);
    }
    Ok(())
}
