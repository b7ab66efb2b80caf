//! Representation-formula and backward-SPDE residuals.

use super::estimates::LadderPoint;
use super::{eval_value, mean_se, scalar_sigma, Pathway, SolverConfig, ValueRequest, ValueSample};
use crate::coefficients::{Coefficients, LawSampler};
use crate::error::{Error, Result};
use crate::paths::{backward_ito_sum, Increments, PathBundle};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Mean-square residual at one node with its standard error across backward paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeResidual {
    pub node: usize,
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub max: f64,
    /// Regression standard error of `Z` at this node, the scale the residual is judged against.
    pub reg_se: f64,
}

/// Per-node residuals and an optional refinement ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub check: String,
    pub nodes: Vec<NodeResidual>,
    pub ladder: Vec<LadderPoint>,
}

impl ResidualReport {
    /// Whether every node residual lies within `factor` regression standard errors.
    pub fn within_regression_error(&self, factor: f64) -> bool {
        self.nodes.iter().all(|r| r.mean <= factor * r.reg_se)
    }
}

/// `E|Z_s − ∂ₓV(s, X_s, μ_s) σ(X_s, μ_s)|²` along the pilot of `value`, with
/// `∂ₓV(s, X_s, μ_s) = ∂ₓY_s / ∂ₓX_s` read off the tangent fields. Nodes where
/// the forward tangent vanishes are skipped.
pub fn check_representation<C: Coefficients + ?Sized>(coeffs: &C, value: &ValueSample) -> Result<ResidualReport> {
    let trace = value.trace.as_ref().ok_or(Error::MissingDerivativeField("value trace"))?;
    let tangents = trace.tangents.as_ref().ok_or(Error::MissingDerivativeField("∂ₓX"))?;
    let dy = trace.dx_fields.first().ok_or(Error::MissingDerivativeField("∂ₓY"))?;
    let pilot = &trace.forward.pilots[0].paths;
    let jac = &tangents.dx[0];
    let z = &trace.solution.pilots[0].field;
    let grid = &trace.forward.grid;
    let mm = z.z.n_bpaths;
    let np = z.z.n_inner;
    let nodes = (0..grid.n_steps())
        .map(|k| {
            let mu = &trace.forward.law_flow[k];
            let per_path: Vec<(f64, f64)> = (0..mm)
                .into_par_iter()
                .map(|m| {
                    let (mut s, mut mx) = (0.0, 0.0f64);
                    for i in 0..np {
                        let j = jac.at(k, i);
                        if j.abs() < 1e-12 {
                            continue;
                        }
                        let x = pilot.at(k, i);
                        let r = z.z.at(k, m, i) - dy.y.at(k, m, i) / j * scalar_sigma(coeffs, x, mu);
                        s += r * r;
                        mx = mx.max(r * r);
                    }
                    (s / np as f64, mx)
                })
                .collect();
            let means: Vec<f64> = per_path.iter().map(|p| p.0).collect();
            let (mean, se) = mean_se(&means);
            let max = per_path.iter().map(|p| p.1).fold(0.0, f64::max);
            NodeResidual { node: k, t: grid.nodes()[k], mean, se, max, reg_se: z.se_z[k] }
        })
        .collect();
    Ok(ResidualReport { check: "representation".into(), nodes, ladder: vec![] })
}

/// Ladder of `E|Z_s^{t,x} − ∂ₓV(s, x, P_ξ) σ(x, P_ξ)|²` against `s − t` for the
/// nodes `s_nodes` of `bundle` (with `t` its first node). `∂ₓV(s, x, P_ξ)` comes
/// from a fresh solve started at `s` from the law of `ξ` on the same backward paths.
pub fn representation_ladder<C: Coefficients + ?Sized>(
    coeffs: &C,
    law: &LawSampler,
    x: &[f64],
    bundle: &PathBundle,
    s_nodes: &[usize],
    cfg: &SolverConfig,
) -> Result<ResidualReport> {
    let base = eval_value(coeffs, 0, x, law, bundle, cfg, &ValueRequest::value_only().with_trace())?;
    let trace = base.trace.as_ref().expect("trace requested");
    let z = &trace.solution.pilots[0].field.z;
    let sig = scalar_sigma(coeffs, x[0], &base.law);
    let grid = &bundle.grid;
    let mut ladder = Vec::with_capacity(s_nodes.len());
    let mut nodes = Vec::with_capacity(s_nodes.len());
    for &s in s_nodes {
        let vs = eval_value(coeffs, s, x, law, bundle, cfg, &ValueRequest::first_order())?;
        let dxv = vs.dx.expect("first order requested");
        let per_path: Vec<f64> = (0..z.n_bpaths)
            .map(|m| (0..z.n_inner).map(|i| (z.at(s, m, i) - dxv[m] * sig).powi(2)).sum::<f64>() / z.n_inner as f64)
            .collect();
        let (mean, se) = mean_se(&per_path);
        let max = per_path.iter().cloned().fold(0.0, f64::max);
        let reg_se = trace.solution.pilots[0].field.se_z.get(s).copied().unwrap_or(0.0);
        nodes.push(NodeResidual { node: s, t: grid.nodes()[s], mean, se, max, reg_se });
        ladder.push(LadderPoint {
            scale: grid.nodes()[s] - grid.t0(),
            value: mean,
            se,
            dt: grid.steps()[0],
            n_inner: bundle.n_particles,
            n_bpaths: bundle.n_bpaths,
        });
    }
    Ok(ResidualReport { check: "representation-bound".into(), nodes, ladder })
}

/// Both-sides gap of the backward SPDE between two times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdeGap {
    pub t: f64,
    pub t_end: f64,
    /// Gap per backward path.
    pub gaps: Vec<f64>,
    pub mean_square: f64,
    /// Standard error of `mean_square` across backward paths.
    pub se: f64,
    /// Root-mean-square gap relative to the root-mean-square of `V(t)`.
    pub relative: f64,
    pub pathway: Pathway,
}

/// Assembles `V(t) − V(t′)` against the drift integral (trapezoid over the
/// sample nodes) and the backward integral (right endpoint against `b`) of the
/// backward SPDE, per backward path. `samples` must hold consecutive nodes of
/// one grid for the same `x`, each with `∂ₓV`, `∂²ₓₓV` and the measure samples,
/// whose points act as equal-weight quadrature nodes for the law of `ξ`.
pub fn check_spde_residual<C: Coefficients + ?Sized>(coeffs: &C, samples: &[ValueSample], b: &Increments) -> Result<SpdeGap> {
    let first = samples.first().ok_or(Error::InsufficientLadder { needed: 1, got: 0 })?;
    let last = samples.last().expect("nonempty");
    let mm = first.n_bpaths();
    if b.n_paths != mm {
        return Err(Error::LengthMismatch { expected: mm, got: b.n_paths });
    }
    for w in samples.windows(2) {
        if w[1].node != w[0].node + 1 || w[1].x != w[0].x {
            return Err(Error::Config("SPDE samples must sit on consecutive nodes at one x".into()));
        }
    }
    let x = &first.x;
    let mut drift = Vec::with_capacity(samples.len());
    let mut back = Vec::with_capacity(samples.len());
    let mut pathway = Pathway::None;
    for s in samples {
        let dx = s.dx.as_ref().ok_or(Error::MissingDerivativeField("∂ₓV"))?;
        let dxx = s.dxx.as_ref().ok_or(Error::MissingDerivativeField("∂²ₓₓV"))?;
        if s.second_order != Pathway::Terminal {
            pathway = s.second_order;
        }
        let mu = &s.law;
        let mut bx = [0.0];
        coeffs.b(x, mu, &mut bx);
        let sig = scalar_sigma(coeffs, x[0], mu);
        let mut h = [0.0];
        coeffs.h(&s.pi_law, &mut h);
        // Law generator term E[∂_μV(ξ) b(ξ) + ½ ∂_y∂_μV(ξ) σ²(ξ)] by quadrature.
        let weights: Vec<(f64, f64)> = s
            .measure
            .iter()
            .map(|ms| {
                let mut by = [0.0];
                coeffs.b(&[ms.y], mu, &mut by);
                (by[0], 0.5 * scalar_sigma(coeffs, ms.y, mu).powi(2))
            })
            .collect();
        let k = s.measure.len().max(1) as f64;
        let (dr, bk): (Vec<f64>, Vec<f64>) = (0..mm)
            .map(|m| {
                let z = [dx[m] * sig];
                let mut g = [0.0];
                coeffs.g(x, s.v[m], &z, &s.pi_law, &mut g);
                let lions: f64 =
                    s.measure.iter().zip(&weights).map(|(ms, (bw, sw))| ms.dmu[m] * bw + ms.dydmu[m] * sw).sum::<f64>() / k;
                let a = dx[m] * bx[0] + 0.5 * dxx[m] * sig * sig + coeffs.f(x, s.v[m], &z, &s.pi_law) + lions;
                (a, g[0] + h[0])
            })
            .unzip();
        drift.push(dr);
        back.push(bk);
    }
    let nodes_t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let k0 = first.node;
    let gaps: Vec<f64> = (0..mm)
        .map(|m| {
            let a: Vec<f64> = drift.iter().map(|v| v[m]).collect();
            let g: Vec<f64> = back.iter().map(|v| v[m]).collect();
            let db: Vec<f64> = (0..samples.len() - 1).map(|j| b.get(m, k0 + j)[0]).collect();
            let trap: f64 = (0..samples.len() - 1).map(|j| 0.5 * (a[j] + a[j + 1]) * (nodes_t[j + 1] - nodes_t[j])).sum();
            let stoch = backward_ito_sum(&g, &db).expect("lengths match");
            first.v[m] - last.v[m] - trap - stoch
        })
        .collect();
    let sq: Vec<f64> = gaps.iter().map(|g| g * g).collect();
    let (mean_square, se) = mean_se(&sq);
    let scale = (first.v.iter().map(|v| v * v).sum::<f64>() / mm as f64).sqrt();
    Ok(SpdeGap {
        t: first.t,
        t_end: last.t,
        gaps,
        mean_square,
        se,
        relative: if scale > 0.0 { mean_square.sqrt() / scale } else { mean_square.sqrt() },
        pathway,
    })
}

impl SpdeGap {
    /// Solves for `V` and its derivatives at every node in `k0..=k1` of `bundle`
    /// (each solve restarted at its node from the law of `ξ` on the remaining
    /// backward increments) and assembles the gap. `quadrature` points sample the
    /// law of `ξ` for the measure-derivative terms; zero skips them.
    #[allow(clippy::too_many_arguments)]
    pub fn between<C: Coefficients + ?Sized>(
        coeffs: &C,
        law: &LawSampler,
        x: &[f64],
        bundle: &PathBundle,
        k0: usize,
        k1: usize,
        quadrature: usize,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        if k1 < k0 {
            return Err(Error::Config(format!("interval end {k1} before start {k0}")));
        }
        let init = law.draw(bundle.n_particles, coeffs.dim(), bundle.seed);
        let points = super::quantile_points(&init, quadrature);
        let samples =
            (k0..=k1).map(|k| eval_value(coeffs, k, x, law, bundle, cfg, &ValueRequest::full(points.clone()))).collect::<Result<Vec<_>>>()?;
        check_spde_residual(coeffs, &samples, &bundle.b)
    }
}

/// One level of a joint `(Δt, N)` refinement ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub steps: usize,
    pub particles: usize,
}

/// Mean-square SPDE gap over `[t, (t+T)/2]` per refinement level, averaged over
/// `replicates` independent bundles of `bpaths` backward paths (seeds
/// `seed, seed+1, ...`); standard errors across replicates. The law sample of
/// `ξ` contributes a gap common to every backward path of one bundle, so
/// independent replicates are what make the standard error honest.
#[allow(clippy::too_many_arguments)]
pub fn spde_refinement_ladder<C: Coefficients + ?Sized>(
    coeffs: &C,
    law: &LawSampler,
    x: &[f64],
    t: f64,
    horizon: f64,
    levels: &[RefinementLevel],
    bpaths: usize,
    replicates: usize,
    quadrature: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Vec<LadderPoint>> {
    levels
        .iter()
        .map(|lv| {
            if lv.steps < 2 || lv.steps % 2 != 0 {
                return Err(Error::Config(format!("refinement level needs an even step count, got {}", lv.steps)));
            }
            let grid = crate::paths::make_grid(t, horizon, lv.steps)?;
            let per_rep = (0..replicates)
                .map(|r| {
                    let b = crate::paths::sample_paths(&grid, coeffs.dim(), coeffs.noise_dim(), lv.particles, bpaths, crate::paths::Seed::new(seed + r as u64));
                    Ok(SpdeGap::between(coeffs, law, x, &b, 0, lv.steps / 2, quadrature, cfg)?.mean_square)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (value, se) = mean_se(&per_rep);
            Ok(LadderPoint { scale: grid.steps()[0], value, se, dt: grid.steps()[0], n_inner: lv.particles, n_bpaths: bpaths })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{coefficients_by_name, Model};
    use crate::paths::{make_grid, sample_paths, Seed};

    fn gauss() -> LawSampler {
        LawSampler::Gaussian { mean: 0.2, sd: 0.5 }
    }

    #[test]
    fn representation_is_exact_for_constant_backward() {
        let c = coefficients_by_name("S1").unwrap();
        let b = sample_paths(&make_grid(0.0, 1.0, 8).unwrap(), 1, 1, 256, 4, Seed::new(2));
        let v = eval_value(&c, 0, &[1.0], &gauss(), &b, &SolverConfig::default(), &ValueRequest::first_order().with_trace()).unwrap();
        let r = check_representation(&c, &v).unwrap();
        assert_eq!(r.nodes.len(), 8);
        assert!(r.nodes.iter().all(|n| n.mean < 1e-20), "{:?}", r.nodes);
    }

    #[test]
    fn spde_gap_vanishes_for_constant_coefficient_closed_form() {
        let c = Model { s0: 0.5, g20: 0.3, h0: 0.2, p1: 1.0, ..Default::default() };
        let b = sample_paths(&make_grid(0.0, 1.0, 8).unwrap(), 1, 1, 512, 4, Seed::new(3));
        let g = SpdeGap::between(&c, &gauss(), &[0.4], &b, 2, 6, 2, &SolverConfig::default()).unwrap();
        assert!(g.relative < 1e-10, "{g:?}");
    }

    #[test]
    fn spde_gap_is_zero_on_a_degenerate_interval() {
        let c = coefficients_by_name("S1").unwrap();
        let b = sample_paths(&make_grid(0.0, 1.0, 4).unwrap(), 1, 1, 512, 3, Seed::new(3));
        let g = SpdeGap::between(&c, &gauss(), &[0.4], &b, 1, 1, 0, &SolverConfig::default()).unwrap();
        assert!(g.gaps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spde_check_requires_derivative_fields() {
        let c = coefficients_by_name("S1").unwrap();
        let b = sample_paths(&make_grid(0.0, 1.0, 4).unwrap(), 1, 1, 512, 3, Seed::new(3));
        let v = eval_value(&c, 1, &[0.4], &gauss(), &b, &SolverConfig::default(), &ValueRequest::value_only()).unwrap();
        assert!(matches!(check_spde_residual(&c, &[v], &b.b), Err(Error::MissingDerivativeField(_))));
    }
}
