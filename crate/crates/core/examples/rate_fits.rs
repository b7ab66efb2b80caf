//! Log-log fits of moment, time-continuity and Ψ_η estimates against the lag.

use mfbdsde::coefficients::{coefficients_by_name, LawSampler};
use mfbdsde::paths::{make_grid, sample_paths, Seed};
use mfbdsde::verify::{fit_estimates, forward_sup_moments, psi_eta_ladder, time_holder_ladder, SolverConfig};

fn main() -> mfbdsde::error::Result<()> {
    let model = coefficients_by_name("S1").expect("catalog id");
    let law = LawSampler::Gaussian { mean: 0.2, sd: 0.5 };
    let bundle = sample_paths(&make_grid(0.0, 1.0, 64)?, 1, 1, 512, 64, Seed::new(11));
    let cfg = SolverConfig::default();
    let lags = [1, 2, 4, 8];
    let fits = [
        fit_estimates("sup moment p=2", &forward_sup_moments(&model, &law, &[0.3], &bundle, &lags, 2.0)?, 1.0, 0.2)?,
        fit_estimates("sup moment p=4", &forward_sup_moments(&model, &law, &[0.3], &bundle, &lags, 4.0)?, 2.0, 0.2)?,
        fit_estimates("time Hölder p=2", &time_holder_ladder(&model, &law, &[0.3], &bundle, 0, &lags, &cfg)?, 1.0, 0.3)?,
        fit_estimates("Ψ_η", &psi_eta_ladder(&model, &law, &[0.3], &bundle, 0, &lags, &cfg)?, 0.5, 0.2)?,
    ];
    for f in &fits {
        println!("{:<16} exponent {:.3} ± {:.3} (target {} ± {}) {}", f.id, f.exponent, f.se, f.target, f.tolerance, if f.pass { "pass" } else { "fail" });
    }
    Ok(())
}
