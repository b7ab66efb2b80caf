//! Time grids, reproducible Brownian increments and discrete Itô sums.

use mfbdsde::paths::{backward_ito_sum, forward_ito_sum, make_grid, sample_paths, Seed};

fn main() -> mfbdsde::error::Result<()> {
    let grid = make_grid(0.0, 1.0, 8)?;
    println!("nodes {:?}", grid.nodes());

    // M backward paths, N inner forward paths, keyed by a root seed.
    let bundle = sample_paths(&grid, 1, 1, 1000, 1000, Seed::new(42));
    let again = sample_paths(&grid, 1, 1, 1000, 1000, Seed::new(42));
    println!("regenerated bit-identically: {}", bundle.w.data == again.w.data && bundle.b.data == again.b.data);

    // Integrand t on the nodes: forward sums use the left point, backward the right.
    let v: Vec<f64> = grid.nodes().to_vec();
    let (mut f2, mut b2) = (0.0, 0.0);
    for p in 0..1000 {
        f2 += forward_ito_sum(&v, &bundle.w.series(p, 0))?.powi(2) / 1000.0;
        b2 += backward_ito_sum(&v, &bundle.b.series(p, 0))?.powi(2) / 1000.0;
    }
    let left: f64 = v[..8].iter().zip(grid.steps()).map(|(t, d)| t * t * d).sum();
    let right: f64 = v[1..].iter().zip(grid.steps()).map(|(t, d)| t * t * d).sum();
    println!("E[(Σ t dW)²] = {f2:.4} (isometry {left:.4})");
    println!("E[(Σ t dB̄)²] = {b2:.4} (isometry {right:.4})");
    Ok(())
}
