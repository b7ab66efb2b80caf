//! Value-function evaluation and numerical checks of the identities the
//! backward solution must satisfy: the representation of `Z` through `∂ₓV`,
//! the backward SPDE solved by `V`, the mean-field Itô formula, and
//! log-log rate fits of the continuity estimates.

mod estimates;
mod flow;
mod ito;
mod residuals;

pub use estimates::{
    fit_estimates, forward_sup_moments, psi_eta_ladder, time_holder_ladder, EstimateFit, LadderPoint, PSI_ETA_CLIP,
};
pub use flow::{check_flow, FlowReport};
pub use ito::{check_ito, BdsdeSamples, ItoGap, ItoTestFunction, QuadraticFunctional};
pub use residuals::{check_representation, check_spde_residual, representation_ladder, spde_refinement_ladder, NodeResidual, RefinementLevel, ResidualReport, SpdeGap};

use crate::backward::{
    frozen_law, solve_dmu_bdsde, solve_dx_bdsde, solve_mf_bdsde, solve_second_order_bdsde, BackwardSolution, Field,
    PicardConfig, RegressionConfig,
};
use crate::coefficients::{Coefficients, LawSampler, ScenarioSpec};
use crate::error::{Error, Result};
use crate::forward::{require_scalar, solve_dmu, solve_dx, solve_from_starts, solve_second_order, ForwardCloud, TangentCloud};
use crate::measures::EmpiricalMeasure;
use crate::paths::PathBundle;
use serde::{Deserialize, Serialize};

/// Regression and Picard settings shared by every solve of a check.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub reg: RegressionConfig,
    pub picard: PicardConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { reg: RegressionConfig::default(), picard: PicardConfig::default() }
    }
}

impl SolverConfig {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        Self {
            reg: RegressionConfig::with_degree(spec.degree),
            picard: PicardConfig { tol: spec.picard_tol, max_iter: spec.picard_max_iter },
        }
    }
}

/// How the second-order derivative samples were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pathway {
    /// Analytic evaluators at the terminal time.
    Terminal,
    /// Second-order derivative BDSDEs (`g` affine in `z`).
    Solver,
    /// Central differences of first-order derivative fields under common random numbers.
    FiniteDifference,
    /// Not requested.
    None,
}

/// Which derivative samples [`eval_value`] should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueRequest {
    pub dx: bool,
    pub dxx: bool,
    /// Points `y` at which `∂_μV(y)` and `∂_y∂_μV(y)` are wanted.
    pub measure_points: Vec<f64>,
    /// Offset of the finite-difference pathway.
    pub fd_step: f64,
    /// Keep the forward cloud, solution and tangent fields for later checks.
    pub keep_trace: bool,
}

impl ValueRequest {
    pub fn value_only() -> Self {
        Self { dx: false, dxx: false, measure_points: vec![], fd_step: 1e-3, keep_trace: false }
    }

    pub fn first_order() -> Self {
        Self { dx: true, ..Self::value_only() }
    }

    /// Every derivative the backward SPDE consumes, with measure terms at `points`.
    pub fn full(points: Vec<f64>) -> Self {
        Self { dx: true, dxx: true, measure_points: points, ..Self::value_only() }
    }

    pub fn with_trace(mut self) -> Self {
        self.keep_trace = true;
        self
    }
}

/// `∂_μV(t, x, P_ξ)(y)` and `∂_y∂_μV(t, x, P_ξ)(y)` per backward path.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSample {
    pub y: f64,
    pub dmu: Vec<f64>,
    pub dydmu: Vec<f64>,
}

/// Everything a check may need to revisit the solve behind a value sample.
#[derive(Debug, Clone)]
pub struct ValueTrace {
    pub forward: ForwardCloud,
    pub solution: BackwardSolution,
    pub tangents: Option<TangentCloud>,
    /// `∂ₓ(Y, Z)` per pilot, when first-order derivatives were requested.
    pub dx_fields: Vec<Field>,
}

/// `V(t, x, P_ξ)` and requested derivatives, one entry per backward path.
#[derive(Debug, Clone)]
pub struct ValueSample {
    pub t: f64,
    /// Node of `t` on the bundle grid.
    pub node: usize,
    pub x: Vec<f64>,
    /// Law of `ξ`.
    pub law: EmpiricalMeasure,
    /// Law of `(ξ, V(t, ξ, P_ξ), ∂ₓV σ(ξ, P_ξ))`, the law argument of `f, g, h` at `t`.
    pub pi_law: EmpiricalMeasure,
    pub v: Vec<f64>,
    /// Regression standard error of `V`.
    pub se: f64,
    pub dx: Option<Vec<f64>>,
    pub dxx: Option<Vec<f64>>,
    pub measure: Vec<MeasureSample>,
    pub second_order: Pathway,
    pub trace: Option<ValueTrace>,
}

impl ValueSample {
    pub fn n_bpaths(&self) -> usize {
        self.v.len()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and standard error of independent replicates.
/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `K` points at the centred quantiles of a scalar sample, used as quadrature
/// nodes for expectations over the law of `ξ`.
pub fn quantile_points(sample: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || sample.is_empty() {
        return vec![];
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    (0..k).map(|j| s[((2 * j + 1) * s.len()) / (2 * k)]).collect()
}

fn scalar_sigma<C: Coefficients + ?Sized>(coeffs: &C, x: f64, mu: &EmpiricalMeasure) -> f64 {
    let mut s = [0.0];
    coeffs.sigma(&[x], mu, &mut s);
    s[0]
}

/// Evaluates `V(t, x, P_ξ)` at node `node` of `bundle` by solving forward and
/// backward on the remaining steps, with `ξ` drawn from `law` under the bundle seed.
/// At the terminal node `V = Φ(x, P_ξ)` exactly and derivatives come from the
/// analytic evaluators of `Φ`.
pub fn eval_value<C: Coefficients + ?Sized>(
    coeffs: &C,
    node: usize,
    x: &[f64],
    law: &LawSampler,
    bundle: &PathBundle,
    cfg: &SolverConfig,
    req: &ValueRequest,
) -> Result<ValueSample> {
    let d = coeffs.dim();
    if x.len() != d {
        return Err(Error::DimMismatch(x.len(), d));
    }
    let n = bundle.grid.n_steps();
    if node > n {
        return Err(Error::Config(format!("node {node} beyond the last grid node {n}")));
    }
    let np = bundle.n_particles;
    let init = law.draw(np, d, bundle.seed);
    let mu = EmpiricalMeasure::new(init.clone(), d)?;
    let derivs = req.dx || req.dxx || !req.measure_points.is_empty();
    if derivs {
        require_scalar(d, coeffs.noise_dim())?;
    }
    if node == n {
        return terminal_sample(coeffs, bundle, x, &init, mu, req);
    }

    let tail = bundle.tail(node)?;
    let fd = derivs && (req.dxx || !req.measure_points.is_empty()) && !coeffs.affine_g();
    let eps = req.fd_step;
    let mut starts = vec![x.to_vec()];
    if fd && req.dxx {
        starts.push(vec![x[0] + eps]);
        starts.push(vec![x[0] - eps]);
    }
    for &y in &req.measure_points {
        for s in if fd { vec![y, y + eps, y - eps] } else { vec![y] } {
            if !starts.iter().any(|p| p[0] == s) {
                starts.push(vec![s]);
            }
        }
    }
    let forward = solve_from_starts(coeffs, &init, &tail, &starts)?;
    let solution = solve_mf_bdsde(coeffs, &forward, &tail, &cfg.reg, &cfg.picard)?;
    let pf = &solution.pilots[0].field;
    let v = pf.initial_values();
    let se = pf.se_y[0];
    let pi_law = frozen_law(coeffs, &solution.x_law, &solution.law.y, &solution.law.z, 0)?;

    let mut out = ValueSample {
        t: bundle.grid.nodes()[node],
        node,
        x: x.to_vec(),
        law: mu,
        pi_law,
        v,
        se,
        dx: None,
        dxx: None,
        measure: vec![],
        second_order: Pathway::None,
        trace: None,
    };
    let mut tangents = None;
    let mut dx_fields = vec![];
    if derivs {
        let t = solve_dx(coeffs, &forward)?;
        let dxf = solve_dx_bdsde(coeffs, &forward, &t, &solution, &cfg.reg)?;
        out.dx = Some(dxf[0].initial_values());
        let pilot_of = |s: f64| forward.pilot_index(&[s]).expect("pilot was requested");
        if req.dxx {
            if fd {
                let (p, m) = (dxf[1].initial_values(), dxf[2].initial_values());
                out.dxx = Some(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * eps)).collect());
                out.second_order = Pathway::FiniteDifference;
            } else {
                let so = solve_second_order(coeffs, &forward, &t)?;
                let sb = solve_second_order_bdsde(coeffs, &forward, &t, &so, &dxf, &solution, &cfg.reg)?;
                out.dxx = Some(sb.dxx[0].initial_values());
                out.second_order = Pathway::Solver;
            }
        }
        for &y in &req.measure_points {
            let ty = solve_dmu(coeffs, &forward, &t, y)?;
            let dm = solve_dmu_bdsde(coeffs, &forward, &ty, &dxf, &solution, &cfg.reg)?;
            let dmu = dm.pilots[0].initial_values();
            let dydmu = if fd {
                let at = |s: f64| -> Result<Vec<f64>> {
                    debug_assert!(pilot_of(s) > 0);
                    let ts = solve_dmu(coeffs, &forward, &t, s)?;
                    Ok(solve_dmu_bdsde(coeffs, &forward, &ts, &dxf, &solution, &cfg.reg)?.pilots[0].initial_values())
                };
                let (p, m) = (at(y + eps)?, at(y - eps)?);
                out.second_order = Pathway::FiniteDifference;
                p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
            } else {
                let so = solve_second_order(coeffs, &forward, &ty)?;
                let sb = solve_second_order_bdsde(coeffs, &forward, &ty, &so, &dxf, &solution, &cfg.reg)?;
                out.second_order = Pathway::Solver;
                sb.dydmu.ok_or(Error::MissingDerivativeField("∂_y∂_μY"))?.pilots[0].initial_values()
            };
            out.measure.push(MeasureSample { y, dmu, dydmu });
        }
        tangents = Some(t);
        dx_fields = dxf;
    }
    if req.keep_trace {
        out.trace = Some(ValueTrace { forward, solution, tangents, dx_fields });
    }
    Ok(out)
}

fn terminal_sample<C: Coefficients + ?Sized>(
    coeffs: &C,
    bundle: &PathBundle,
    x: &[f64],
    init: &[f64],
    mu: EmpiricalMeasure,
    req: &ValueRequest,
) -> Result<ValueSample> {
    let mm = bundle.n_bpaths;
    let d = coeffs.dim();
    let phi = coeffs.phi(x, &mu);
    let dphi = |xv: f64| coeffs.dx_phi(xv, &mu).ok_or(Error::MissingDerivative("dx_phi"));
    // Z at the terminal time is ∂ₓΦ σ; without ∂ₓΦ it is left at zero.
    let mut pts = Vec::with_capacity(init.len() / d * (2 * d + 1));
    for xi in init.chunks(d) {
        pts.extend_from_slice(xi);
        pts.push(coeffs.phi(xi, &mu));
        let z = if d == 1 { coeffs.dx_phi(xi[0], &mu).map_or(0.0, |g| g * scalar_sigma(coeffs, xi[0], &mu)) } else { 0.0 };
        pts.extend(std::iter::repeat(z).take(d));
    }
    let pi_law = EmpiricalMeasure::new(pts, 2 * d + 1)?;
    let mut out = ValueSample {
        t: bundle.grid.horizon(),
        node: bundle.grid.n_steps(),
        x: x.to_vec(),
        law: mu.clone(),
        pi_law,
        v: vec![phi; mm],
        se: 0.0,
        dx: None,
        dxx: None,
        measure: vec![],
        second_order: Pathway::None,
        trace: None,
    };
    if req.dx || req.dxx || !req.measure_points.is_empty() {
        out.dx = Some(vec![dphi(x[0])?; mm]);
    }
    if req.dxx {
        out.dxx = Some(vec![coeffs.dxx_phi(x[0], &mu).ok_or(Error::MissingDerivative("dxx_phi"))?; mm]);
        out.second_order = Pathway::Terminal;
    }
    for &y in &req.measure_points {
        let a = coeffs.dmu_phi(x[0], &mu, y).ok_or(Error::MissingDerivative("dmu_phi"))?;
        let b = coeffs.dy_dmu_phi(x[0], &mu, y).ok_or(Error::MissingDerivative("dy_dmu_phi"))?;
        out.measure.push(MeasureSample { y, dmu: vec![a; mm], dydmu: vec![b; mm] });
        out.second_order = Pathway::Terminal;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::coefficients_by_name;
    use crate::paths::{make_grid, sample_paths, Seed};

    fn bundle(n: usize, np: usize, mm: usize) -> PathBundle {
        sample_paths(&make_grid(0.0, 1.0, n).unwrap(), 1, 1, np, mm, Seed::new(11))
    }

    #[test]
    fn terminal_value_is_phi_on_every_path() {
        let c = coefficients_by_name("S5").unwrap();
        let b = bundle(4, 64, 5);
        let law = LawSampler::Gaussian { mean: 0.2, sd: 0.5 };
        let s = eval_value(&c, 4, &[0.3], &law, &b, &SolverConfig::default(), &ValueRequest::full(vec![0.1])).unwrap();
        let mu = EmpiricalMeasure::new(law.draw(64, 1, b.seed), 1).unwrap();
        let phi = c.phi(&[0.3], &mu);
        assert!(s.v.iter().all(|&v| v.to_bits() == phi.to_bits()));
        assert_eq!(s.second_order, Pathway::Terminal);
        assert_eq!(s.measure[0].dmu.len(), 5);
    }

    #[test]
    fn constant_backward_value_matches_closed_form() {
        let c = coefficients_by_name("S1").unwrap();
        let b = bundle(8, 256, 6);
        let law = LawSampler::Gaussian { mean: 0.2, sd: 0.5 };
        let s = eval_value(&c, 2, &[1.0], &law, &b, &SolverConfig::default(), &ValueRequest::first_order()).unwrap();
        for m in 0..6 {
            let bt: f64 = (2..8).map(|k| b.b.get(m, k)[0]).sum();
            assert!((s.v[m] - (1.0 + 0.4 * bt)).abs() < 1e-9);
            assert!((s.dx.as_ref().unwrap()[m] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_points_are_sorted_and_inside_the_sample() {
        let q = quantile_points(&[5.0, 1.0, 3.0, 2.0, 4.0], 2);
        assert_eq!(q, vec![2.0, 4.0]);
        assert!(quantile_points(&[1.0], 0).is_empty());
    }
}
