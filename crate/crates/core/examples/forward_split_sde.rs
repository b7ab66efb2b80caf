//! The law system and pilots of the split McKean-Vlasov SDE, restarts, and the
//! first-order and Malliavin tangents.

use mfbdsde::coefficients::{coefficients_by_name, LawSampler};
use mfbdsde::forward::{malliavin_product_gap, restart, solve_dx, solve_from_starts, solve_malliavin_forward};
use mfbdsde::paths::{make_grid, sample_paths, Seed};

fn main() -> mfbdsde::error::Result<()> {
    let model = coefficients_by_name("S4").expect("catalog id");
    let bundle = sample_paths(&make_grid(0.0, 1.0, 32)?, 1, 1, 2048, 1, Seed::new(3));
    let init = LawSampler::Gaussian { mean: 0.2, sd: 0.5 }.draw(2048, 1, bundle.seed);
    let cloud = solve_from_starts(&model, &init, &bundle, &[vec![0.3], vec![-0.3]])?;
    for k in [0, 16, 32] {
        println!("t = {:.3}: law mean {:.4}, pilot(0.3) mean {:.4}", bundle.grid.nodes()[k], cloud.law.node_mean(k), cloud.pilots[0].paths.node_mean(k));
    }

    let re = restart(&model, &cloud, &bundle, 16)?;
    let same = (0..=16).all(|r| re.law.slab(r) == cloud.law.slab(16 + r));
    println!("restart at node 16 reproduces the law paths: {same}");

    let tangents = solve_dx(&model, &cloud)?;
    let mall = solve_malliavin_forward(&model, &cloud, 8)?;
    println!("D_θX vanishes before θ: {}", (0..8).all(|k| mall.d_theta[0].slab(k).iter().all(|v| *v == 0.0)));
    println!("product formula gap: {:.2e}", malliavin_product_gap(&model, &cloud, &tangents, &mall, 0));
    Ok(())
}
