//! Spatial, measure and second-order derivatives of the value function,
//! compared with common-random-number finite differences.

use mfbdsde::coefficients::{coefficients_by_name, LawSampler};
use mfbdsde::paths::{make_grid, sample_paths, Seed};
use mfbdsde::verify::{eval_value, SolverConfig, ValueRequest};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> mfbdsde::error::Result<()> {
    let model = coefficients_by_name("S5").expect("catalog id");
    let law = LawSampler::Gaussian { mean: 0.2, sd: 0.5 };
    let bundle = sample_paths(&make_grid(0.0, 1.0, 16)?, 1, 1, 512, 8, Seed::new(21));
    let cfg = SolverConfig::default();
    let (x, y, eps) = (0.3, 0.1, 1e-3);

    let v = eval_value(&model, 0, &[x], &law, &bundle, &cfg, &ValueRequest::full(vec![y]))?;
    let up = eval_value(&model, 0, &[x + eps], &law, &bundle, &cfg, &ValueRequest::first_order())?;
    let dn = eval_value(&model, 0, &[x - eps], &law, &bundle, &cfg, &ValueRequest::first_order())?;
    let fd = |a: &[f64], b: &[f64]| (mean(a) - mean(b)) / (2.0 * eps);
    println!("∂ₓV     solver {:.5}  fd {:.5}", mean(v.dx.as_ref().unwrap()), fd(&up.v, &dn.v));
    println!("∂²ₓₓV   solver {:.5}  fd {:.5}  ({:?})", mean(v.dxx.as_ref().unwrap()), fd(up.dx.as_ref().unwrap(), dn.dx.as_ref().unwrap()), v.second_order);

    let at = |p: f64| ValueRequest { measure_points: vec![p], ..ValueRequest::first_order() };
    let (mu_up, mu_dn) = (eval_value(&model, 0, &[x], &law, &bundle, &cfg, &at(y + eps))?, eval_value(&model, 0, &[x], &law, &bundle, &cfg, &at(y - eps))?);
    println!("∂_μV(y) solver {:.5}", mean(&v.measure[0].dmu));
    println!("∂y∂_μV  solver {:.5}  fd {:.5}", mean(&v.measure[0].dydmu), fd(&mu_up.measure[0].dmu, &mu_dn.measure[0].dmu));

    // For a point mass at y, shifting the whole law differentiates along ζ ≡ 1.
    let point = eval_value(&model, 0, &[x], &LawSampler::Dirac(y), &bundle, &cfg, &at(y))?;
    let shift = |h: f64| eval_value(&model, 0, &[x], &LawSampler::Dirac(y + h), &bundle, &cfg, &ValueRequest::value_only()).map(|s| s.v);
    println!("∂_μV(δ_y)(y) solver {:.5}  fd {:.5}", mean(&point.measure[0].dmu), fd(&shift(eps)?, &shift(-eps)?));
    Ok(())
}
