//! Mean-field BDSDE solver: an outer Picard loop on the law of `(X, Y, Z)` and an
//! inner backward regression recursion run per backward path, plus derivative
//! and Malliavin BDSDEs expressed as linear BDSDEs.

mod derivatives;
mod linear;
mod regression;

pub use derivatives::{
    solve_dmu_bdsde, solve_dx_bdsde, solve_malliavin_bdsde, solve_second_order_bdsde, DmuBackward, MalliavinBackward, SecondOrderBackward,
    ZIdentification,
};
pub use linear::{solve_linear_bdsde, LinearBdsdeSpec, LinearTerms, MeanFieldWeights};
pub use regression::{Design, Fit, RegressionConfig};

use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::forward::{ForwardCloud, NodeArray};
use crate::measures::EmpiricalMeasure;
use crate::paths::{Increments, PathBundle, TimeGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Backward fields laid out `[node][bpath][inner][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BField {
    pub n_nodes: usize,
    pub n_bpaths: usize,
    pub n_inner: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl BField {
    pub fn zeros(n_nodes: usize, n_bpaths: usize, n_inner: usize, width: usize) -> Self {
        Self { n_nodes, n_bpaths, n_inner, width, data: vec![0.0; n_nodes * n_bpaths * n_inner * width] }
    }

    #[inline]
    fn offset(&self, k: usize, m: usize, i: usize) -> usize {
        ((k * self.n_bpaths + m) * self.n_inner + i) * self.width
    }

    pub fn get(&self, k: usize, m: usize, i: usize) -> &[f64] {
        let o = self.offset(k, m, i);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn at(&self, k: usize, m: usize, i: usize) -> f64 {
        self.data[self.offset(k, m, i)]
    }

    /// Every sample at node `k`, `[bpath][inner][width]`.
    pub fn slab(&self, k: usize) -> &[f64] {
        let w = self.n_bpaths * self.n_inner * self.width;
        &self.data[k * w..(k + 1) * w]
    }

    fn slab_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.n_bpaths * self.n_inner * self.width;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// Pooled mean of the first component at node `k`.
    pub fn node_mean(&self, k: usize) -> f64 {
        let s = self.slab(k);
        s.iter().step_by(self.width).sum::<f64>() / (self.n_bpaths * self.n_inner) as f64
    }

    /// Mean over inner particles of the first component at `(k, m)`.
    pub fn path_mean(&self, k: usize, m: usize) -> f64 {
        (0..self.n_inner).map(|i| self.at(k, m, i)).sum::<f64>() / self.n_inner as f64
    }

    /// Copy of the nodes from `start` on.
    pub fn tail(&self, start: usize) -> Self {
        let w = self.n_bpaths * self.n_inner * self.width;
        Self { n_nodes: self.n_nodes - start, data: self.data[start * w..].to_vec(), ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { tol: 1e-3, max_iter: 20 }
    }
}

/// `(Y, Z)` on a population together with nodewise regression standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub y: BField,
    pub z: BField,
    /// Standard error of the fitted `Y` per node.
    pub se_y: Vec<f64>,
    /// Standard error of the fitted `Z` per node.
    pub se_z: Vec<f64>,
    /// First solved node; earlier nodes are zero.
    pub start: usize,
}

impl Field {
    /// `Y` at the start node, one value per backward path (inner particle 0).
    pub fn initial_values(&self) -> Vec<f64> {
        (0..self.y.n_bpaths).map(|m| self.y.at(self.start, m, 0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSolution {
    pub start: Vec<f64>,
    pub field: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub grid: TimeGrid,
    pub d: usize,
    pub l: usize,
    /// Law particle states the solution was computed on.
    pub x_law: NodeArray,
    /// Backward increments, one path per outer sample.
    pub b: Increments,
    /// `(Y^{t,ξ}, Z^{t,ξ})` over law particles.
    pub law: Field,
    /// `(Y^{t,x}, Z^{t,x})` per pilot start.
    pub pilots: Vec<PilotSolution>,
    pub picard_iters: usize,
    /// Law-flow change after each Picard iteration.
    pub picard_residuals: Vec<f64>,
    pub picard_residual: f64,
    pub converged: bool,
}

impl BackwardSolution {
    /// Pooled empirical law of `(X, Y, Z)` over all backward paths and law particles at node `k`.
    pub fn law_at(&self, k: usize) -> Result<EmpiricalMeasure> {
        pooled_law(&self.x_law, &self.law.y, &self.law.z, k, self.law.y.n_bpaths)
    }

    pub fn law_flow(&self) -> Result<Vec<EmpiricalMeasure>> {
        (0..self.grid.n_nodes()).map(|k| self.law_at(k)).collect()
    }

    pub fn pilot(&self, x: &[f64]) -> Result<&PilotSolution> {
        self.pilots.iter().find(|p| p.start == x).ok_or_else(|| Error::Config(format!("no pilot solution at {x:?}")))
    }

    /// `V(t, x, P_ξ)` per backward path for the pilot started at `x`.
    pub fn value(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pilot(x)?.field.initial_values())
    }
}

/// Empirical law of `(x, y, z)` atoms at node `k` over the first `bpaths` backward paths.
pub(crate) fn pooled_law(x: &NodeArray, y: &BField, z: &BField, k: usize, bpaths: usize) -> Result<EmpiricalMeasure> {
    let d = x.width;
    let width = 2 * d + 1;
    let n = y.n_inner;
    let mut pts = Vec::with_capacity(bpaths * n * width);
    for m in 0..bpaths {
        for i in 0..n {
            pts.extend_from_slice(x.get(k, i));
            pts.push(y.at(k, m, i));
            pts.extend_from_slice(z.get(k, m, i));
        }
    }
    EmpiricalMeasure::new(pts, width).map_err(|_| Error::NonfiniteState { node: k })
}

/// Builds the regression designs for steps `start..n`, with optional tangent features.
pub(crate) fn build_designs(
    grid: &TimeGrid,
    x: &NodeArray,
    w: &Increments,
    start: usize,
    nf: usize,
    feats: &(dyn Fn(usize, usize, &mut [f64]) + Sync),
    reg: &RegressionConfig,
) -> Result<Vec<Option<Design>>> {
    let n = grid.n_steps();
    let d = x.width;
    let np = x.n_paths;
    (0..n)
        .into_par_iter()
        .map(|k| {
            if k < start {
                return Ok(None);
            }
            let mut f = vec![0.0; np * nf];
            for i in 0..np {
                feats(k, i, &mut f[i * nf..(i + 1) * nf]);
            }
            let mut dw = vec![0.0; np * d];
            for i in 0..np {
                dw[i * d..(i + 1) * d].copy_from_slice(w.get(i, k));
            }
            Design::new(x.slab(k), d, &f, nf, &dw, grid.steps()[k], reg).map(Some)
        })
        .collect()
}

pub(crate) fn no_features(_: usize, _: usize, _: &mut [f64]) {}

/// Driver evaluated at node `k + 1` for sample `(m, i)` with `(Y, Z)` there:
/// returns the `dr` integrand and writes the `dB̄` integrand into the last argument.
pub(crate) type Driver<'a, C> = dyn Fn(&C, usize, usize, usize, f64, &[f64], &mut [f64]) -> f64 + Sync + 'a;

/// One backward sweep over nodes `n-1..start`. `node_ctx(k + 1, y, z)` runs once
/// per node before that node's regressions and sees the fields solved so far.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sweep<Ctx: Sync>(
    grid: &TimeGrid,
    d: usize,
    start: usize,
    designs: &[Option<Design>],
    b: &Increments,
    terminal: &(dyn Fn(usize, usize) -> f64 + Sync),
    node_ctx: &mut dyn FnMut(usize, &BField, &BField) -> Result<Ctx>,
    driver: &Driver<'_, Ctx>,
) -> Result<Field> {
    let n = grid.n_steps();
    let mm = b.n_paths;
    let l = b.dim;
    let np = designs.iter().flatten().next().map(|d| d.n()).ok_or(Error::ZeroSteps)?;
    let mut y = BField::zeros(n + 1, mm, np, 1);
    let mut z = BField::zeros(n + 1, mm, np, d);
    let mut se_y = vec![0.0; n + 1];
    let mut se_z = vec![0.0; n + 1];
    {
        let yn = y.slab_mut(n);
        yn.par_chunks_mut(np).enumerate().for_each(|(m, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = terminal(m, i);
            }
        });
    }
    if !y.slab(n).iter().all(|v| v.is_finite()) {
        return Err(Error::NonfiniteState { node: n });
    }
    if let Some(design) = &designs[n - 1] {
        let (head, tail) = z.data.split_at_mut(n * mm * np * d);
        let _ = head;
        let yn = y.slab(n);
        tail.par_chunks_mut(np * d).enumerate().for_each(|(m, zrow)| {
            let fit = design.fit(&yn[m * np..(m + 1) * np]);
            for i in 0..np {
                for c in 0..d {
                    zrow[i * d + c] = design.b_part(&fit, i, c);
                }
            }
        });
    }
    for k in (start..n).rev() {
        let design = designs[k].as_ref().expect("design for solved node");
        let dt = grid.steps()[k];
        let ctx = node_ctx(k + 1, &y, &z)?;
        let w = mm * np;
        let (ylo, yhi) = y.data.split_at_mut((k + 1) * w);
        let (zlo, zhi) = z.data.split_at_mut((k + 1) * w * d);
        let y_next = &yhi[..w];
        let z_next = &zhi[..w * d];
        let y_cur = &mut ylo[k * w..];
        let z_cur = &mut zlo[k * w * d..];
        let stats: Vec<(f64, f64, bool)> = y_cur
            .par_chunks_mut(np)
            .zip(z_cur.par_chunks_mut(np * d))
            .enumerate()
            .map(|(m, (yrow, zrow))| {
                let db = b.get(m, k);
                let mut g = vec![0.0; l];
                let mut a = vec![0.0; np];
                let mut t = vec![0.0; np];
                for i in 0..np {
                    let yv = y_next[m * np + i];
                    let zv = &z_next[(m * np + i) * d..(m * np + i + 1) * d];
                    let f = driver(&ctx, k + 1, m, i, yv, zv, &mut g);
                    let gb: f64 = g.iter().zip(db).map(|(u, v)| u * v).sum();
                    a[i] = yv + gb;
                    t[i] = a[i] + f * dt;
                }
                let fy = design.fit(&t);
                let fz = design.fit(&a);
                let mut ok = true;
                for i in 0..np {
                    yrow[i] = design.a_part(&fy, i);
                    ok &= yrow[i].is_finite();
                    for c in 0..d {
                        zrow[i * d + c] = design.b_part(&fz, i, c);
                        ok &= zrow[i * d + c].is_finite();
                    }
                }
                (design.residual_variance(&fy, &t), design.residual_variance(&fz, &a), ok)
            })
            .collect();
        if stats.iter().any(|s| !s.2) {
            return Err(Error::NonfiniteState { node: k });
        }
        let vy = stats.iter().map(|s| s.0).sum::<f64>() / mm as f64;
        let vz = stats.iter().map(|s| s.1).sum::<f64>() / mm as f64;
        se_y[k] = (vy / np as f64).sqrt();
        se_z[k] = (vz / (np as f64 * dt)).sqrt();
    }
    Ok(Field { y, z, se_y, se_z, start })
}

/// Law argument handed to `f, g, h` at each node: the full pooled law when the
/// coefficients depend on it, otherwise the samples of the first backward path.
pub(crate) fn frozen_law<C: Coefficients + ?Sized>(coeffs: &C, x: &NodeArray, y: &BField, z: &BField, k: usize) -> Result<EmpiricalMeasure> {
    let bpaths = if coeffs.pi_law_dependent() { y.n_bpaths } else { 1 };
    pooled_law(x, y, z, k, bpaths)
}

struct BaseCtx {
    law: EmpiricalMeasure,
    h: Vec<f64>,
}

fn base_driver<'a, C: Coefficients + ?Sized>(coeffs: &'a C, x: &'a NodeArray) -> impl Fn(&BaseCtx, usize, usize, usize, f64, &[f64], &mut [f64]) -> f64 + Sync + 'a {
    move |ctx, k1, _m, i, y, z, g| {
        let xs = x.get(k1, i);
        coeffs.g(xs, y, z, &ctx.law, g);
        g.iter_mut().zip(&ctx.h).for_each(|(a, b)| *a += b);
        coeffs.f(xs, y, z, &ctx.law)
    }
}

fn base_ctx<C: Coefficients + ?Sized>(coeffs: &C, law: EmpiricalMeasure) -> BaseCtx {
    let mut h = vec![0.0; coeffs.noise_dim()];
    coeffs.h(&law, &mut h);
    BaseCtx { law, h }
}

/// `Σ_k Δ_k · sqrt(mean |ΔY|² + |ΔZ|²)` over nodes `0..n`: the matched-coupling
/// bound on the summed nodewise W₂ change of the law of `(X, Y, Z)`.
fn flow_change(grid: &TimeGrid, a: &Field, b: &Field) -> f64 {
    (0..grid.n_steps())
        .map(|k| {
            let (ya, yb) = (a.y.slab(k), b.y.slab(k));
            let (za, zb) = (a.z.slab(k), b.z.slab(k));
            let s: f64 = ya.iter().zip(yb).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
                + za.iter().zip(zb).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            grid.steps()[k] * (s / (ya.len() as f64)).sqrt()
        })
        .sum()
}

/// Solves the law system by Picard iteration on the law of `(X, Y, Z)` (starting
/// from `Y = Z = 0`), then each pilot against the converged law.
pub fn solve_mf_bdsde<C: Coefficients + ?Sized>(
    coeffs: &C,
    forward: &ForwardCloud,
    bundle: &PathBundle,
    reg: &RegressionConfig,
    picard: &PicardConfig,
) -> Result<BackwardSolution> {
    let grid = &forward.grid;
    let n = grid.n_steps();
    let d = forward.d;
    let l = coeffs.noise_dim();
    if bundle.b.n_steps != n || bundle.b.dim != l {
        return Err(Error::LengthMismatch { expected: n, got: bundle.b.n_steps });
    }
    let b = &bundle.b;
    let mm = b.n_paths;
    let xl = &forward.law;
    let mu_t = forward.terminal_law();
    let designs = build_designs(grid, xl, &forward.law_w, 0, 0, &no_features, reg)?;
    let terminal = |_m: usize, i: usize| coeffs.phi(xl.get(n, i), mu_t);
    let driver = base_driver(coeffs, xl);

    let np = xl.n_paths;
    let mut prev = Field {
        y: BField::zeros(n + 1, mm, np, 1),
        z: BField::zeros(n + 1, mm, np, d),
        se_y: vec![],
        se_z: vec![],
        start: 0,
    };
    let mut residuals = Vec::new();
    let mut increases = 0;
    let mut converged = false;
    for iter in 1..=picard.max_iter.max(1) {
        let cur = {
            let p = &prev;
            let mut ctx = |k1: usize, _: &BField, _: &BField| Ok(base_ctx(coeffs, frozen_law(coeffs, xl, &p.y, &p.z, k1)?));
            sweep(grid, d, 0, &designs, b, &terminal, &mut ctx, &driver)?
        };
        let r = flow_change(grid, &cur, &prev);
        if let Some(&last) = residuals.last() {
            if r > last {
                increases += 1;
                if increases >= 3 {
                    return Err(Error::PicardDivergence { iterations: iter });
                }
            } else {
                increases = 0;
            }
        }
        residuals.push(r);
        prev = cur;
        if r <= picard.tol {
            converged = true;
            break;
        }
    }
    let law = prev;
    let pilots = forward
        .pilots
        .iter()
        .map(|pl| {
            let designs = build_designs(grid, &pl.paths, &forward.pilot_w, 0, 0, &no_features, reg)?;
            let terminal = |_m: usize, i: usize| coeffs.phi(pl.paths.get(n, i), mu_t);
            let driver = base_driver(coeffs, &pl.paths);
            let mut ctx = |k1: usize, _: &BField, _: &BField| Ok(base_ctx(coeffs, frozen_law(coeffs, xl, &law.y, &law.z, k1)?));
            let field = sweep(grid, d, 0, &designs, b, &terminal, &mut ctx, &driver)?;
            Ok(PilotSolution { start: pl.start.clone(), field })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BackwardSolution {
        grid: grid.clone(),
        d,
        l,
        x_law: xl.clone(),
        b: b.clone(),
        picard_iters: residuals.len(),
        picard_residual: *residuals.last().unwrap_or(&0.0),
        picard_residuals: residuals,
        converged,
        law,
        pilots,
    })
}
