//! Both-sides check of the mean-field Itô formula for `F(s, U_s, P_{Y_s})` with
//! `U`, `Y` solutions of scalar BDSDEs on a common grid.

use super::mean_se;
use crate::backward::{frozen_law, BField, BackwardSolution};
use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::forward::{ForwardCloud, NodeArray, HAT_CAP};
use crate::measures::EmpiricalMeasure;
use crate::paths::{Increments, TimeGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A test function `F(t, x, μ)` on `[0, T] × ℝ × P₂(ℝ)` with the derivatives the
/// Itô formula consumes.
pub trait ItoTestFunction: Sync {
    fn value(&self, t: f64, x: f64, mu: &EmpiricalMeasure) -> f64;
    fn dt(&self, t: f64, x: f64, mu: &EmpiricalMeasure) -> f64;
    fn dx(&self, t: f64, x: f64, mu: &EmpiricalMeasure) -> f64;
    fn dxx(&self, t: f64, x: f64, mu: &EmpiricalMeasure) -> f64;
    fn dmu(&self, t: f64, x: f64, mu: &EmpiricalMeasure, hat: f64) -> f64;
    fn dydmu(&self, t: f64, x: f64, mu: &EmpiricalMeasure, hat: f64) -> f64;
    /// Whether the Lions derivatives ignore `x`, so the `Ê` term is shared by every path.
    fn lions_x_independent(&self) -> bool {
        false
    }
}

/// `F(t, x, μ) = a x² + b t x + c ∫y² μ(dy) + e (∫y μ(dy))²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFunctional {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub e: f64,
}

impl QuadraticFunctional {
    fn moments(mu: &EmpiricalMeasure) -> (f64, f64) {
        (mu.mean()[0], mu.second_moment()[0])
    }
}

impl ItoTestFunction for QuadraticFunctional {
    fn value(&self, t: f64, x: f64, mu: &EmpiricalMeasure) -> f64 {
        let (m, q) = Self::moments(mu);
        self.a * x * x + self.b * t * x + self.c * q + self.e * m * m
    }
    fn dt(&self, _t: f64, x: f64, _mu: &EmpiricalMeasure) -> f64 {
        self.b * x
    }
    fn dx(&self, t: f64, x: f64, _mu: &EmpiricalMeasure) -> f64 {
        2.0 * self.a * x + self.b * t
    }
    fn dxx(&self, _t: f64, _x: f64, _mu: &EmpiricalMeasure) -> f64 {
        2.0 * self.a
    }
    fn dmu(&self, _t: f64, _x: f64, mu: &EmpiricalMeasure, hat: f64) -> f64 {
        2.0 * self.c * hat + 2.0 * self.e * Self::moments(mu).0
    }
    fn dydmu(&self, _t: f64, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> f64 {
        2.0 * self.c
    }
    fn lions_x_independent(&self) -> bool {
        true
    }
}

/// A scalar BDSDE `Y_t = ξ + ∫f ds + ∫g dB̄ − ∫Z dW` sampled on a grid:
/// fields `[node][B-path][inner]`, forward increments per inner path, backward
/// increments per B-path.
#[derive(Debug, Clone, PartialEq)]
pub struct BdsdeSamples {
    pub grid: TimeGrid,
    pub y: BField,
    pub z: BField,
    pub f: BField,
    pub g: BField,
    pub dw: Increments,
    pub db: Increments,
}

impl BdsdeSamples {
    fn drivers<C: Coefficients + ?Sized>(
        coeffs: &C,
        x: &NodeArray,
        sol: &BackwardSolution,
        y: &BField,
        z: &BField,
    ) -> Result<(BField, BField)> {
        let (nn, mm, np) = (y.n_nodes, y.n_bpaths, y.n_inner);
        let mut f = BField::zeros(nn, mm, np, 1);
        let mut g = BField::zeros(nn, mm, np, 1);
        for k in 0..nn {
            let law = frozen_law(coeffs, &sol.x_law, &sol.law.y, &sol.law.z, k)?;
            let mut h = [0.0];
            coeffs.h(&law, &mut h);
            let w = mm * np;
            let (fs, gs) = (&mut f.data[k * w..(k + 1) * w], &mut g.data[k * w..(k + 1) * w]);
            fs.par_iter_mut().zip(gs.par_iter_mut()).enumerate().for_each(|(j, (fv, gv))| {
                let (m, i) = (j / np, j % np);
                let (xs, yv, zv) = (x.get(k, i), y.at(k, m, i), z.get(k, m, i));
                let mut gg = [0.0];
                coeffs.g(xs, yv, zv, &law, &mut gg);
                *fv = coeffs.f(xs, yv, zv, &law);
                *gv = gg[0] + h[0];
            });
        }
        Ok((f, g))
    }

    /// The law system `(Y^{t,ξ}, Z^{t,ξ})` of a solved mean-field BDSDE with its
    /// drivers evaluated along the solution.
    pub fn from_law<C: Coefficients + ?Sized>(coeffs: &C, forward: &ForwardCloud, sol: &BackwardSolution) -> Result<Self> {
        crate::forward::require_scalar(forward.d, coeffs.noise_dim())?;
        let (f, g) = Self::drivers(coeffs, &forward.law, sol, &sol.law.y, &sol.law.z)?;
        Ok(Self {
            grid: forward.grid.clone(),
            y: sol.law.y.clone(),
            z: sol.law.z.clone(),
            f,
            g,
            dw: forward.law_w.clone(),
            db: sol.b.clone(),
        })
    }

    /// The pilot system `(Y^{t,x}, Z^{t,x})` for pilot index `p`.
    pub fn from_pilot<C: Coefficients + ?Sized>(coeffs: &C, forward: &ForwardCloud, sol: &BackwardSolution, p: usize) -> Result<Self> {
        crate::forward::require_scalar(forward.d, coeffs.noise_dim())?;
        let fld = &sol.pilots.get(p).ok_or(Error::MissingDerivativeField("pilot"))?.field;
        let (f, g) = Self::drivers(coeffs, &forward.pilots[p].paths, sol, &fld.y, &fld.z)?;
        Ok(Self {
            grid: forward.grid.clone(),
            y: fld.y.clone(),
            z: fld.z.clone(),
            f,
            g,
            dw: forward.pilot_w.clone(),
            db: sol.b.clone(),
        })
    }

    fn n(&self) -> usize {
        self.grid.n_steps()
    }
}

/// Mean both-sides gap of the Itô formula over all paths of `U`, with the
/// standard error taken across independent groups of backward paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoGap {
    pub mean: f64,
    pub se: f64,
    pub group_means: Vec<f64>,
    pub n_samples: usize,
    pub dt: f64,
}

/// Evaluates `F(t, U_t, P_{Y_t}) − F(T, U_T, P_{Y_T})` minus the right-hand side
/// of the mean-field Itô formula for every path of `uv`. Backward paths are split
/// into `groups` contiguous groups; within a group `P_{Y_s}` is the pooled
/// empirical law of its `Y` atoms and `Ê[·]` averages over those atoms (a strided
/// subsample when the Lions derivatives depend on `x`). Time integrals use the
/// trapezoid rule, `dB̄` integrals the right endpoint and `dW` integrals the left.
pub fn check_ito<F: ItoTestFunction + ?Sized>(func: &F, yz: &BdsdeSamples, uv: &BdsdeSamples, groups: usize) -> Result<ItoGap> {
    if yz.grid != uv.grid {
        return Err(Error::Config("Itô check needs both BDSDEs on one grid".into()));
    }
    let mm = uv.y.n_bpaths;
    if yz.y.n_bpaths != mm {
        return Err(Error::LengthMismatch { expected: mm, got: yz.y.n_bpaths });
    }
    if groups == 0 || groups > mm {
        return Err(Error::Config(format!("group count {groups} must lie in 1..={mm}")));
    }
    let n = uv.n();
    let nodes = uv.grid.nodes();
    let steps = uv.grid.steps();
    let size = mm.div_ceil(groups);
    let group_means: Vec<f64> = (0..groups)
        .map(|gidx| {
            let ms: Vec<usize> = (gidx * size..((gidx + 1) * size).min(mm)).collect();
            if ms.is_empty() {
                return Ok(None);
            }
            let laws = (0..=n)
                .map(|k| {
                    let pts: Vec<f64> = ms.iter().flat_map(|&m| (0..yz.y.n_inner).map(move |i| yz.y.at(k, m, i))).collect();
                    EmpiricalMeasure::new(pts, 1)
                })
                .collect::<Result<Vec<_>>>()?;
            let atoms: Vec<(usize, usize)> = ms.iter().flat_map(|&m| (0..yz.y.n_inner).map(move |i| (m, i))).collect();
            let stride = if func.lions_x_independent() { 1 } else { atoms.len().div_ceil(HAT_CAP) };
            let hat = |k: usize, x: f64| -> f64 {
                let t = nodes[k];
                let sel = atoms.iter().step_by(stride);
                let cnt = atoms.len().div_ceil(stride) as f64;
                sel.map(|&(m, i)| {
                    let (yh, zh, fh, gh) = (yz.y.at(k, m, i), yz.z.at(k, m, i), yz.f.at(k, m, i), yz.g.at(k, m, i));
                    let a = func.dmu(t, x, &laws[k], yh);
                    let b = func.dydmu(t, x, &laws[k], yh);
                    a * fh - 0.5 * b * zh * zh + 0.5 * b * gh * gh
                })
                .sum::<f64>()
                    / cnt
            };
            let shared: Option<Vec<f64>> = func.lions_x_independent().then(|| (0..=n).map(|k| hat(k, 0.0)).collect());
            let paths: Vec<(usize, usize)> = ms.iter().flat_map(|&m| (0..uv.y.n_inner).map(move |i| (m, i))).collect();
            let total: f64 = paths
                .par_iter()
                .map(|&(m, i)| {
                    let mut a = vec![0.0; n + 1];
                    let mut dxf = vec![0.0; n + 1];
                    for k in 0..=n {
                        let (t, u) = (nodes[k], uv.y.at(k, m, i));
                        let mu = &laws[k];
                        let (zu, fu, gu) = (uv.z.at(k, m, i), uv.f.at(k, m, i), uv.g.at(k, m, i));
                        dxf[k] = func.dx(t, u, mu);
                        let fxx = func.dxx(t, u, mu);
                        let h = shared.as_ref().map_or_else(|| hat(k, u), |s| s[k]);
                        a[k] = -func.dt(t, u, mu) + dxf[k] * fu + 0.5 * fxx * (gu * gu - zu * zu) + h;
                    }
                    let lhs = func.value(nodes[0], uv.y.at(0, m, i), &laws[0]) - func.value(nodes[n], uv.y.at(n, m, i), &laws[n]);
                    let mut rhs = 0.0;
                    for k in 0..n {
                        rhs += 0.5 * (a[k] + a[k + 1]) * steps[k];
                        rhs += dxf[k + 1] * uv.g.at(k + 1, m, i) * uv.db.get(m, k)[0];
                        rhs -= dxf[k] * uv.z.at(k, m, i) * uv.dw.get(i, k)[0];
                    }
                    lhs - rhs
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            Ok(Some(total / paths.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let (mean, se) = mean_se(&group_means);
    Ok(ItoGap { mean, se, group_means, n_samples: mm * uv.y.n_inner, dt: steps[0] })
}
