//! Shows which video tokens a caption is biased towards, and how the bias
//! weight `w` shifts attention onto the caption's tokens.

use eventcanvas::attention::{build_bias, sawca, AttentionMode};
use eventcanvas::condition::LatentGrid;
use eventcanvas::nn::Mat;
use eventcanvas::synthgen::caption_vocabulary;
use eventcanvas::text::caption_spans;
use eventcanvas::triplet::{BBox, Caption, MultimodalTriplet, Point, TrajectoryTrack};

fn main() -> eventcanvas::Result<()> {
    let grid = LatentGrid::desk_default();
    let n = grid.num_frames;
    let mut t = MultimodalTriplet::new((64, 64), n);
    let red = "the red circle moves right";
    let blue = "the blue square moves down";
    let a: Vec<Point> = (0..n).map(|f| Point::new(8.0 + 3.0 * f as f32, 16.0)).collect();
    let b: Vec<Point> = (0..n).map(|f| Point::new(48.0, 8.0 + 3.0 * f as f32)).collect();
    t.push_foreground(TrajectoryTrack::new("a", a, vec![true; n]), BBox::new(8.0, 16.0, 12.0, 12.0), Caption::new(red, "red circle"));
    t.push_foreground(TrajectoryTrack::new("b", b, vec![true; n]), BBox::new(48.0, 8.0, 12.0, 12.0), Caption::new(blue, "blue square"));

    let (tokens, spans) = caption_spans(&[("a", red), ("b", blue)], &caption_vocabulary())?;
    for s in &spans {
        println!("track {} -> caption tokens {:?}", s.track_id, s.tokens);
    }
    let bias = build_bias(&t, &grid, &spans, tokens.len(), 30.0)?;

    for k in [0, grid.latent_frames() - 1] {
        println!("latent frame {k} (a = red, b = blue):");
        for row in 0..grid.height() {
            let line: String = (0..grid.width())
                .map(|col| {
                    let q = grid.token_index(k, row, col);
                    match bias.tracks.iter().find(|tb| tb.queries[q]) {
                        Some(tb) => tb.track_id.chars().next().unwrap(),
                        None => '.',
                    }
                })
                .collect();
            println!("  {line}");
        }
    }

    // Constant queries and keys: without a bias every caption token gets
    // equal weight, so the mass on a track's span is its share of tokens.
    let q = Mat::from_vec(grid.num_tokens(), 4, vec![0.1; grid.num_tokens() * 4]);
    let k = Mat::from_vec(tokens.len(), 4, vec![0.1; tokens.len() * 4]);
    let v = Mat::from_vec(tokens.len(), 4, vec![1.0; tokens.len() * 4]);
    let query = bias.tracks[0].queries.iter().position(|&c| c).expect("track a covers a token");
    for w in [1.0, 30.0, 1000.0] {
        let b = build_bias(&t, &grid, &spans, tokens.len(), w)?;
        let (_, weights) = sawca(&q, &k, &v, &b, AttentionMode::Weighted)?;
        let mass: f64 = spans[0].tokens.clone().map(|j| weights.at(query, j)).sum();
        println!("w = {w:>6}: token {query} puts {:.3} of its attention on the red caption", mass);
    }
    let (_, hard) = sawca(&q, &k, &v, &bias, AttentionMode::Hard)?;
    let mass: f64 = spans[0].tokens.clone().map(|j| hard.at(query, j)).sum();
    println!("hard mode: {mass:.3}");
    Ok(())
}
