//! Both-sides check of the mean-field Itô formula for a quadratic functional.

use mfbdsde::backward::solve_mf_bdsde;
use mfbdsde::coefficients::{coefficients_by_name, LawSampler};
use mfbdsde::forward::solve_from_starts;
use mfbdsde::paths::{make_grid, sample_paths, Seed};
use mfbdsde::verify::{check_ito, BdsdeSamples, QuadraticFunctional, SolverConfig};

fn main() -> mfbdsde::error::Result<()> {
    let model = coefficients_by_name("S4").expect("catalog id");
    let cfg = SolverConfig::default();
    let func = QuadraticFunctional { a: 1.0, b: 1.0, c: 1.0, e: 0.0 };
    for n in [8, 16, 32] {
        let bundle = sample_paths(&make_grid(0.0, 1.0, n)?, 1, 1, 256, 64, Seed::new(7));
        let init = LawSampler::Gaussian { mean: 0.2, sd: 0.5 }.draw(256, 1, bundle.seed);
        let cloud = solve_from_starts(&model, &init, &bundle, &[vec![0.3]])?;
        let sol = solve_mf_bdsde(&model, &cloud, &bundle, &cfg.reg, &cfg.picard)?;
        let yz = BdsdeSamples::from_law(&model, &cloud, &sol)?;
        let uv = BdsdeSamples::from_pilot(&model, &cloud, &sol, 0)?;
        let gap = check_ito(&func, &yz, &uv, 16)?;
        println!("n = {n:>3}: gap {:+.4e} ± {:.2e}", gap.mean, gap.se);
    }
    Ok(())
}
