//! Log-log rate fits of continuity estimates and the ladders that feed them.

use super::{eval_value, mean_se, SolverConfig, ValueRequest};
use crate::coefficients::{Coefficients, LawSampler};
use crate::error::{Error, Result};
use crate::forward::solve_from_starts;
use crate::paths::PathBundle;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Clip level of the normalized backward increment used as the test variable `η`.
pub const PSI_ETA_CLIP: f64 = 3.0;

/// One scale point of a refinement or continuity ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    /// Abscissa of the fit (step, time lag or particle count).
    pub scale: f64,
    pub value: f64,
    pub se: f64,
    pub dt: f64,
    pub n_inner: usize,
    pub n_bpaths: usize,
}

/// Fitted `value ≈ constant · scale^exponent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFit {
    pub id: String,
    pub exponent: f64,
    pub constant: f64,
    /// Standard error of the exponent.
    pub se: f64,
    /// 95% confidence interval of the exponent.
    pub ci: (f64, f64),
    pub target: f64,
    pub tolerance: f64,
    /// Every ladder value is exactly zero, a degenerate but passing fit.
    pub exact_zero: bool,
    pub pass: bool,
    pub points: Vec<LadderPoint>,
}

/// Least-squares fit of `log value` on `log scale` over at least four points.
/// Passes when the exponent is within `tolerance` of `target`, or when every
/// value is exactly zero.
pub fn fit_estimates(id: &str, points: &[LadderPoint], target: f64, tolerance: f64) -> Result<EstimateFit> {
    if points.len() < 4 {
        return Err(Error::InsufficientLadder { needed: 4, got: points.len() });
    }
    let mut fit = EstimateFit {
        id: id.to_string(),
        exponent: f64::NAN,
        constant: f64::NAN,
        se: f64::NAN,
        ci: (f64::NAN, f64::NAN),
        target,
        tolerance,
        exact_zero: false,
        pass: false,
        points: points.to_vec(),
    };
    if points.iter().all(|p| p.value == 0.0) {
        fit.exact_zero = true;
        fit.pass = true;
        fit.exponent = target;
        fit.constant = 0.0;
        fit.se = 0.0;
        fit.ci = (target, target);
        return Ok(fit);
    }
    if points.iter().any(|p| !(p.value > 0.0 && p.scale > 0.0)) {
        return Ok(fit);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.scale.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Ok(fit);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0).map_err(|e| Error::Config(e.to_string()))?.inverse_cdf(0.975);
    fit.exponent = slope;
    fit.constant = icpt.exp();
    fit.se = se;
    fit.ci = (slope - t * se, slope + t * se);
    fit.pass = (slope - target).abs() <= tolerance;
    Ok(fit)
}

/// `E[sup_{s ≤ t+h} |X_s^{t,x} − x|^p]` along the pilot from `x` for each
/// horizon node in `h_nodes` of `bundle`, with standard errors over pilot paths.
pub fn forward_sup_moments<C: Coefficients + ?Sized>(
    coeffs: &C,
    law: &LawSampler,
    x: &[f64],
    bundle: &PathBundle,
    h_nodes: &[usize],
    p: f64,
) -> Result<Vec<LadderPoint>> {
    let d = coeffs.dim();
    let init = law.draw(bundle.n_particles, d, bundle.seed);
    let cloud = solve_from_starts(coeffs, &init, bundle, &[x.to_vec()])?;
    let paths = &cloud.pilots[0].paths;
    let grid = &bundle.grid;
    h_nodes
        .iter()
        .map(|&kh| {
            if kh == 0 || kh > grid.n_steps() {
                return Err(Error::Config(format!("horizon node {kh} outside 1..={}", grid.n_steps())));
            }
            let sups: Vec<f64> = (0..paths.n_paths)
                .map(|i| {
                    (1..=kh)
                        .map(|k| paths.get(k, i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                        .fold(0.0, f64::max)
                        .powf(p)
                })
                .collect();
            let (value, se) = mean_se(&sups);
            Ok(LadderPoint {
                scale: grid.nodes()[kh] - grid.t0(),
                value,
                se,
                dt: grid.steps()[0],
                n_inner: bundle.n_particles,
                n_bpaths: 1,
            })
        })
        .collect()
}

/// `E|V(t+q, x, P_ξ) − V(t, x, P_ξ)|²` on common backward paths for `t` at node
/// `t_node` and each `t + q` at `t_node + lag` for `lag` in `lags`.
pub fn time_holder_ladder<C: Coefficients + ?Sized>(
    coeffs: &C,
    law: &LawSampler,
    x: &[f64],
    bundle: &PathBundle,
    t_node: usize,
    lags: &[usize],
    cfg: &SolverConfig,
) -> Result<Vec<LadderPoint>> {
    let req = ValueRequest::value_only();
    let base = eval_value(coeffs, t_node, x, law, bundle, cfg, &req)?;
    let grid = &bundle.grid;
    lags.iter()
        .map(|&lag| {
            let s = eval_value(coeffs, t_node + lag, x, law, bundle, cfg, &req)?;
            let sq: Vec<f64> = s.v.iter().zip(&base.v).map(|(a, b)| (a - b) * (a - b)).collect();
            let (value, se) = mean_se(&sq);
            Ok(LadderPoint {
                scale: grid.nodes()[t_node + lag] - grid.nodes()[t_node],
                value,
                se,
                dt: grid.steps()[0],
                n_inner: bundle.n_particles,
                n_bpaths: bundle.n_bpaths,
            })
        })
        .collect()
}

/// `|Ψ_η(t+q) − Ψ_η(t)|` with `Ψ_η(s) = E[V(s, x, P_ξ) η]` and the bounded test
/// variable `η = clip((B_{t+q} − B_t)/√q, ±PSI_ETA_CLIP)`, one per lag.
pub fn psi_eta_ladder<C: Coefficients + ?Sized>(
    coeffs: &C,
    law: &LawSampler,
    x: &[f64],
    bundle: &PathBundle,
    t_node: usize,
    lags: &[usize],
    cfg: &SolverConfig,
) -> Result<Vec<LadderPoint>> {
    if coeffs.noise_dim() != 1 {
        return Err(Error::Unsupported("Ψ_η ladder uses scalar backward noise".into()));
    }
    let req = ValueRequest::value_only();
    let base = eval_value(coeffs, t_node, x, law, bundle, cfg, &req)?;
    let grid = &bundle.grid;
    lags.iter()
        .map(|&lag| {
            let s = eval_value(coeffs, t_node + lag, x, law, bundle, cfg, &req)?;
            let q = grid.nodes()[t_node + lag] - grid.nodes()[t_node];
            let prod: Vec<f64> = (0..bundle.n_bpaths)
                .map(|m| {
                    let db: f64 = (t_node..t_node + lag).map(|k| bundle.b.get(m, k)[0]).sum();
                    let eta = (db / q.sqrt()).clamp(-PSI_ETA_CLIP, PSI_ETA_CLIP);
                    (s.v[m] - base.v[m]) * eta
                })
                .collect();
            let (mean, se) = mean_se(&prod);
            Ok(LadderPoint {
                scale: q,
                value: mean.abs(),
                se,
                dt: grid.steps()[0],
                n_inner: bundle.n_particles,
                n_bpaths: bundle.n_bpaths,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(f: impl Fn(f64) -> f64) -> Vec<LadderPoint> {
        [0.125, 0.25, 0.5, 1.0]
            .iter()
            .map(|&s| LadderPoint { scale: s, value: f(s), se: 0.0, dt: 0.0, n_inner: 1, n_bpaths: 1 })
            .collect()
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let f = fit_estimates("pow", &pts(|s| 3.0 * s.powf(0.7)), 0.7, 0.01).unwrap();
        assert!((f.exponent - 0.7).abs() < 1e-12);
        assert!((f.constant - 3.0).abs() < 1e-12);
        assert!(f.pass && !f.exact_zero);
    }

    #[test]
    fn all_zero_values_pass_as_exact_zero() {
        let f = fit_estimates("zero", &pts(|_| 0.0), 1.0, 0.2).unwrap();
        assert!(f.pass && f.exact_zero);
    }

    #[test]
    fn short_ladders_are_rejected() {
        let p = pts(|s| s);
        assert_eq!(fit_estimates("short", &p[..1], 1.0, 0.2).unwrap_err(), Error::InsufficientLadder { needed: 4, got: 1 });
    }

    #[test]
    fn wrong_exponent_fails() {
        let f = fit_estimates("lin", &pts(|s| s), 0.5, 0.2).unwrap();
        assert!(!f.pass);
        assert!(f.ci.0 <= f.exponent && f.exponent <= f.ci.1);
    }
}
