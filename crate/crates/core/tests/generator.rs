use ticft::metrics::smoothness;
use ticft::rng::Rng;
use ticft::tasks::{gen_smooth_clip, Blob, Grid};

/// L2 distance between two unbounded Gaussian blobs of amplitude `I` and
/// width `r` whose centres are `d` apart, from the closed-form integral
/// `||g1 - g2||^2 = 2 I^2 pi r^2 (1 - exp(-d^2 / 4r^2))`.
fn continuous_step(blob: &Blob, d: f64) -> f64 {
    let (i, r) = (blob.intensity, blob.radius);
    (2.0 * i * i * std::f64::consts::PI * r * r * (1.0 - (-d * d / (4.0 * r * r)).exp())).sqrt()
}

fn oracle_smoothness(blob: &Blob, frames: usize, grid: Grid) -> f64 {
    let total: f64 = (0..frames - 1)
        .map(|k| {
            let (x0, y0) = blob.position(k, grid);
            let (x1, y1) = blob.position(k + 1, grid);
            continuous_step(blob, (x1 - x0).hypot(y1 - y0))
        })
        .sum();
    total / (frames - 1) as f64
}

#[test]
fn smoothness_over_1000_clips_matches_continuous_limit() {
    let grid = Grid::default();
    let frames = 8;
    let mut rng = Rng::for_purpose(0, "generator-mc");
    let (mut measured, mut oracle) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let clip = gen_smooth_clip(&mut rng, frames, grid).unwrap();
        let s = smoothness(&clip.frames);
        let o = oracle_smoothness(&clip.blob, frames, grid);
        // The grid truncates the blob, which only removes energy; sampling a
        // Gaussian of width >= 1 on unit pixels matches the integral closely.
        assert!(s <= o * (1.0 + 1e-3) + 1e-6, "clip smoothness {s} above continuous bound {o}");
        measured.push(s);
        oracle.push(o);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&measured) / mean(&oracle);
    println!(
        "generator smoothness: mean {:.4}, continuous limit {:.4}, ratio {ratio:.4}",
        mean(&measured),
        mean(&oracle)
    );
    // Centres lie inside the grid, so at least a quarter of each blob's
    // energy stays on it and the norm keeps at least half its value.
    assert!((0.5..=1.0 + 1e-3).contains(&ratio), "ratio {ratio}");
}

#[test]
fn reflected_steps_never_exceed_speed() {
    let grid = Grid::default();
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let clip = gen_smooth_clip(&mut rng, 13, grid).unwrap();
        let b = clip.blob;
        for k in 0..12 {
            let (x0, y0) = b.position(k, grid);
            let (x1, y1) = b.position(k + 1, grid);
            assert!((x1 - x0).hypot(y1 - y0) <= b.speed() + 1e-12);
        }
    }
}
