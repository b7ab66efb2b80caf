//! Derivative and Malliavin BDSDEs (`d = l = 1`), each posed as a linear BDSDE
//! whose coefficients are read off the differentiated base equation with the
//! base processes frozen from a converged solution.

use super::linear::{solve_linear_bdsde, LinearBdsdeSpec, LinearTerms, MeanFieldWeights};
use super::{frozen_law, BackwardSolution, Field, RegressionConfig};
use crate::coefficients::{Coefficients, Triple};
use crate::error::{Error, Result};
use crate::forward::{require_scalar, ForwardCloud, MalliavinForwardCloud, NodeArray, SecondOrderCloud, TangentCloud};
use crate::measures::EmpiricalMeasure;
use rayon::prelude::*;

fn need<T>(v: Option<T>, name: &'static str) -> Result<T> {
    v.ok_or(Error::MissingDerivative(name))
}

#[inline]
fn triple(x: &NodeArray, f: &Field, k: usize, m: usize, i: usize) -> Triple {
    [x.at(k, i), f.y.at(k, m, i), f.z.at(k, m, i)]
}

#[inline]
fn dot(a: Triple, b: Triple) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn quad(h: &[Triple; 3], v: Triple) -> f64 {
    (0..3).map(|a| (0..3).map(|b| v[a] * h[a][b] * v[b]).sum::<f64>()).sum()
}

/// Shared inputs: frozen laws of `Π` per node and first-order derivative checks.
struct Frozen<'a, C: Coefficients + ?Sized> {
    coeffs: &'a C,
    forward: &'a ForwardCloud,
    sol: &'a BackwardSolution,
    laws: Vec<EmpiricalMeasure>,
}

impl<'a, C: Coefficients + ?Sized> Frozen<'a, C> {
    fn new(coeffs: &'a C, forward: &'a ForwardCloud, sol: &'a BackwardSolution) -> Result<Self> {
        require_scalar(forward.d, coeffs.noise_dim())?;
        let laws = (0..forward.n_nodes())
            .map(|k| frozen_law(coeffs, &sol.x_law, &sol.law.y, &sol.law.z, k))
            .collect::<Result<Vec<_>>>()?;
        let p = [0.0; 3];
        need(coeffs.grad_f(p, &laws[0]), "grad_f")?;
        need(coeffs.grad_g(p, &laws[0]), "grad_g")?;
        need(coeffs.dx_phi(0.0, forward.terminal_law()), "dx_phi")?;
        Ok(Self { coeffs, forward, sol, laws })
    }

    fn n(&self) -> usize {
        self.forward.grid.n_steps()
    }

    fn pilot(&self, p: usize) -> (&NodeArray, &Field) {
        (&self.forward.pilots[p].paths, &self.sol.pilots[p].field)
    }

    /// First-order terms for own state `Π`, tangent `T` in `x`: `R = f_x T`, `H = g_x T`.
    fn first_order(&self, k1: usize, p: Triple, t: f64) -> LinearTerms {
        let law = &self.laws[k1];
        let gf = self.coeffs.grad_f(p, law).expect("checked");
        let gg = self.coeffs.grad_g(p, law).expect("checked");
        LinearTerms { r: gf[0] * t, lambda: gf[1], gamma: gf[2], h: gg[0] * t, beta: gg[1], delta: gg[2] }
    }

    /// Pooled mean over every `(m, i)` sample at node `k` of `f(m, i)`.
    fn pooled(&self, f: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
        let mm = self.sol.law.y.n_bpaths;
        let np = self.forward.n_particles();
        let s: f64 = (0..mm).into_par_iter().map(|m| (0..np).map(|i| f(m, i)).sum::<f64>()).collect::<Vec<_>>().iter().sum();
        s / (mm * np) as f64
    }
}

/// `∂ₓ(Y, Z)` for every pilot.
pub fn solve_dx_bdsde<C: Coefficients + ?Sized>(
    coeffs: &C,
    forward: &ForwardCloud,
    tangents: &TangentCloud,
    solution: &BackwardSolution,
    reg: &RegressionConfig,
) -> Result<Vec<Field>> {
    let fz = Frozen::new(coeffs, forward, solution)?;
    (0..forward.pilots.len()).map(|p| tangent_system(&fz, p, &tangents.dx[p], 0, reg)).collect()
}

/// Linear system driven by a forward tangent-like process `t` along pilot `p`
/// from node `start`: the `∂ₓ` system for `t = ∂ₓX`, the Malliavin one for `t = D_θX`.
fn tangent_system<C: Coefficients + ?Sized>(fz: &Frozen<'_, C>, p: usize, t: &NodeArray, start: usize, reg: &RegressionConfig) -> Result<Field> {
    let (x, base) = fz.pilot(p);
    let n = fz.n();
    let mu_t = fz.forward.terminal_law();
    let mut spec = LinearBdsdeSpec::new(move |_, i| fz.coeffs.dx_phi(x.at(n, i), mu_t).unwrap() * t.at(n, i));
    spec.local = Box::new(move |k1, m, i| fz.first_order(k1, triple(x, base, k1, m, i), t.at(k1, i)));
    spec.n_features = 1;
    spec.features = Box::new(move |k, i, out| out[0] = t.at(k, i));
    spec.start = start;
    solve_linear_bdsde(&spec, &fz.forward.grid, x, &fz.forward.pilot_w, &fz.sol.b, reg)
}


/// `E|Z_θ − D_θY_{θ+1}|²` over all samples of one pilot, with its standard error across backward paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZIdentification {
    pub theta: usize,
    pub mean_square: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinBackward {
    pub theta: usize,
    /// `(D_θY, D_θZ)` per pilot, zero before `θ`.
    pub fields: Vec<Field>,
    /// Present when `θ` is not the last node.
    pub identification: Vec<ZIdentification>,
}

pub fn solve_malliavin_bdsde<C: Coefficients + ?Sized>(
    coeffs: &C,
    forward: &ForwardCloud,
    mall: &MalliavinForwardCloud,
    solution: &BackwardSolution,
    reg: &RegressionConfig,
) -> Result<MalliavinBackward> {
    let n = forward.grid.n_steps();
    if mall.theta > n {
        return Err(Error::ThetaOffGrid { theta: mall.theta, last: n });
    }
    let fz = Frozen::new(coeffs, forward, solution)?;
    let th = mall.theta;
    let fields = (0..forward.pilots.len())
        .map(|p| tangent_system(&fz, p, &mall.d_theta[p], th, reg))
        .collect::<Result<Vec<_>>>()?;
    let identification = if th < n {
        fields
            .iter()
            .enumerate()
            .map(|(p, f)| {
                let z = &solution.pilots[p].field.z;
                let mm = z.n_bpaths;
                let np = z.n_inner;
                let per: Vec<f64> = (0..mm)
                    .map(|m| (0..np).map(|i| (z.at(th, m, i) - f.y.at(th + 1, m, i)).powi(2)).sum::<f64>() / np as f64)
                    .collect();
                let (mean, se) = mean_se(&per);
                ZIdentification { theta: th, mean_square: mean, se }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(MalliavinBackward { theta: th, fields, identification })
}

pub(crate) fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `(∂_μY(y), ∂_μZ(y))`: the law system `(O^ξ, Q^ξ)` and one field per pilot.
#[derive(Debug, Clone, PartialEq)]
pub struct DmuBackward {
    pub y: f64,
    pub law: Field,
    pub pilots: Vec<Field>,
}

/// Per-node constants of a measure-derivative system.
struct MeasureTerms {
    drift: Vec<f64>,
    backward: Vec<f64>,
    terminal: f64,
}

/// Shared builder for the two-stage measure systems. `own_t(pop)` gives the
/// forward measure tangent of each population, `hat_y` the per-node constants
/// contributed by the pilot at `y`, and `law_x` the forward law tangent.
fn measure_system<C: Coefficients + ?Sized>(
    fz: &Frozen<'_, C>,
    hat_y: &MeasureTerms,
    law_t: &NodeArray,
    pilot_t: &[NodeArray],
    reg: &RegressionConfig,
) -> Result<(Field, Vec<Field>)> {
    let c = fz.coeffs;
    let n = fz.n();
    let fw = fz.forward;
    let sol = fz.sol;
    let xl = &fw.law;
    let mu_t = fw.terminal_law();
    let gh = |p: Triple, k: usize, hat: Triple| -> Triple {
        let a = c.dmu_g(p, &fz.laws[k], hat).unwrap();
        let b = c.dmu_h(&fz.laws[k], hat).unwrap();
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    };
    // Law x̂ terms: Ê[∂_μ(·)_x̂(Π̂^ξ) T̂^ξ].
    let mut law_drift = vec![0.0; n + 1];
    let mut law_back = vec![0.0; n + 1];
    for k in 0..=n {
        law_drift[k] = fz.pooled(|m, i| {
            let h = triple(xl, &sol.law, k, m, i);
            c.dmu_f(h, &fz.laws[k], h).unwrap()[0] * law_t.at(k, i)
        });
        law_back[k] = fz.pooled(|m, i| {
            let h = triple(xl, &sol.law, k, m, i);
            gh(h, k, h)[0] * law_t.at(k, i)
        });
    }
    let law_term = (0..xl.n_paths).map(|i| c.dmu_phi(0.0, mu_t, xl.at(n, i)).unwrap() * law_t.at(n, i)).sum::<f64>() / xl.n_paths as f64;
    let const_terminal = hat_y.terminal + law_term;

    let law_field = {
        let mut spec = LinearBdsdeSpec::new(move |_, i| c.dx_phi(xl.at(n, i), mu_t).unwrap() * law_t.at(n, i) + const_terminal);
        let (ld, lb) = (&law_drift, &law_back);
        spec.local = Box::new(move |k1, m, i| {
            let mut t = fz.first_order(k1, triple(xl, &sol.law, k1, m, i), law_t.at(k1, i));
            t.r += hat_y.drift[k1] + ld[k1];
            t.h += hat_y.backward[k1] + lb[k1];
            t
        });
        spec.mean_field = Some(Box::new(move |k1, m, i| {
            let h = triple(xl, &sol.law, k1, m, i);
            let df = c.dmu_f(h, &fz.laws[k1], h).unwrap();
            let dg = gh(h, k1, h);
            MeanFieldWeights { zeta: df[1], theta: df[2], eta: dg[1], rho: dg[2] }
        }));
        spec.n_features = 1;
        spec.features = Box::new(move |k, i, out| out[0] = law_t.at(k, i));
        solve_linear_bdsde(&spec, &fw.grid, xl, &fw.law_w, &fz.sol.b, reg)?
    };

    // Pilot stage: the law system enters through pooled constants.
    let mut self_drift = vec![0.0; n + 1];
    let mut self_back = vec![0.0; n + 1];
    for k in 0..=n {
        self_drift[k] = fz.pooled(|m, i| {
            let h = triple(xl, &sol.law, k, m, i);
            let df = c.dmu_f(h, &fz.laws[k], h).unwrap();
            df[1] * law_field.y.at(k, m, i) + df[2] * law_field.z.at(k, m, i)
        });
        self_back[k] = fz.pooled(|m, i| {
            let h = triple(xl, &sol.law, k, m, i);
            let dg = gh(h, k, h);
            dg[1] * law_field.y.at(k, m, i) + dg[2] * law_field.z.at(k, m, i)
        });
    }
    let pilots = pilot_t
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let (x, base) = fz.pilot(p);
            let mut spec = LinearBdsdeSpec::new(move |_, i| c.dx_phi(x.at(n, i), mu_t).unwrap() * t.at(n, i) + const_terminal);
            let (ld, lb, sd, sb) = (&law_drift, &law_back, &self_drift, &self_back);
            spec.local = Box::new(move |k1, m, i| {
                let mut lt = fz.first_order(k1, triple(x, base, k1, m, i), t.at(k1, i));
                lt.r += hat_y.drift[k1] + ld[k1] + sd[k1];
                lt.h += hat_y.backward[k1] + lb[k1] + sb[k1];
                lt
            });
            spec.n_features = 1;
            spec.features = Box::new(move |k, i, out| out[0] = t.at(k, i));
            solve_linear_bdsde(&spec, &fw.grid, x, &fw.pilot_w, &fz.sol.b, reg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((law_field, pilots))
}

fn check_measure<C: Coefficients + ?Sized>(fz: &Frozen<'_, C>) -> Result<()> {
    let c = fz.coeffs;
    if !c.lions_own_independent() {
        return Err(Error::Unsupported("backward measure derivatives need Lions derivatives independent of their own point".into()));
    }
    let p = [0.0; 3];
    let law = &fz.laws[0];
    need(c.dmu_f(p, law, p), "dmu_f")?;
    need(c.dmu_g(p, law, p), "dmu_g")?;
    need(c.dmu_h(law, p), "dmu_h")?;
    need(c.dmu_phi(0.0, fz.forward.terminal_law(), 0.0), "dmu_phi")?;
    Ok(())
}

/// Two-stage solve of `(∂_μY(y), ∂_μZ(y))`: the law system first, then every pilot.
/// `tangents` must carry `∂_μX(y)` and `dx` the `∂ₓ(Y, Z)` fields of every pilot.
pub fn solve_dmu_bdsde<C: Coefficients + ?Sized>(
    coeffs: &C,
    forward: &ForwardCloud,
    tangents: &TangentCloud,
    dx: &[Field],
    solution: &BackwardSolution,
    reg: &RegressionConfig,
) -> Result<DmuBackward> {
    let fz = Frozen::new(coeffs, forward, solution)?;
    check_measure(&fz)?;
    let dm = tangents.dmu.as_ref().ok_or(Error::MissingDerivativeField("measure tangent"))?;
    let yp = dm.y_pilot;
    let (xy, by) = fz.pilot(yp);
    let jy = &tangents.dx[yp];
    let dxy = &dx[yp];
    let n = fz.n();
    let mut hat = MeasureTerms { drift: vec![0.0; n + 1], backward: vec![0.0; n + 1], terminal: 0.0 };
    for k in 0..=n {
        let law = &fz.laws[k];
        hat.drift[k] = fz.pooled(|m, i| {
            let h = triple(xy, by, k, m, i);
            dot(coeffs.dmu_f(h, law, h).unwrap(), [jy.at(k, i), dxy.y.at(k, m, i), dxy.z.at(k, m, i)])
        });
        hat.backward[k] = fz.pooled(|m, i| {
            let h = triple(xy, by, k, m, i);
            let a = coeffs.dmu_g(h, law, h).unwrap();
            let b = coeffs.dmu_h(law, h).unwrap();
            dot([a[0] + b[0], a[1] + b[1], a[2] + b[2]], [jy.at(k, i), dxy.y.at(k, m, i), dxy.z.at(k, m, i)])
        });
    }
    let mu_t = forward.terminal_law();
    hat.terminal = (0..xy.n_paths).map(|i| coeffs.dmu_phi(0.0, mu_t, xy.at(n, i)).unwrap() * jy.at(n, i)).sum::<f64>() / xy.n_paths as f64;
    let (law, pilots) = measure_system(&fz, &hat, &dm.law_u, &dm.pilot_u, reg)?;
    Ok(DmuBackward { y: dm.y, law, pilots })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderBackward {
    /// `(∂²ₓₓY, ∂²ₓₓZ)` per pilot.
    pub dxx: Vec<Field>,
    /// `(∂_y∂_μY(y), ∂_y∂_μZ(y))` when the forward second-order cloud carries it.
    pub dydmu: Option<DmuBackward>,
}

/// Second-order backward derivatives; requires `g` affine in `z`.
pub fn solve_second_order_bdsde<C: Coefficients + ?Sized>(
    coeffs: &C,
    forward: &ForwardCloud,
    tangents: &TangentCloud,
    second: &SecondOrderCloud,
    dx: &[Field],
    solution: &BackwardSolution,
    reg: &RegressionConfig,
) -> Result<SecondOrderBackward> {
    if !coeffs.affine_g() {
        return Err(Error::NonAffineG);
    }
    let fz = Frozen::new(coeffs, forward, solution)?;
    let law0 = &fz.laws[0];
    need(coeffs.hess_f([0.0; 3], law0), "hess_f")?;
    need(coeffs.hess_g1(0.0, 0.0, law0), "hess_g1")?;
    need(coeffs.dxx_phi(0.0, forward.terminal_law()), "dxx_phi")?;
    let n = fz.n();
    let mu_t = forward.terminal_law();
    let fzr = &fz;
    let dxx = (0..forward.pilots.len())
        .map(|p| {
            let (x, base) = fzr.pilot(p);
            let j = &tangents.dx[p];
            let kk = &second.dxx[p];
            let d1 = &dx[p];
            let mut spec = LinearBdsdeSpec::new(move |_, i| {
                let jt = j.at(n, i);
                coeffs.dxx_phi(x.at(n, i), mu_t).unwrap() * jt * jt + coeffs.dx_phi(x.at(n, i), mu_t).unwrap() * kk.at(n, i)
            });
            spec.local = Box::new(move |k1, m, i| {
                let law = &fzr.laws[k1];
                let pi = triple(x, base, k1, m, i);
                let gf = coeffs.grad_f(pi, law).unwrap();
                let gg = coeffs.grad_g(pi, law).unwrap();
                let hf = coeffs.hess_f(pi, law).unwrap();
                let hg = coeffs.hess_g1(pi[0], pi[1], law).unwrap();
                let dpi = [j.at(k1, i), d1.y.at(k1, m, i), d1.z.at(k1, m, i)];
                let qg = hg[0][0] * dpi[0] * dpi[0] + 2.0 * hg[0][1] * dpi[0] * dpi[1] + hg[1][1] * dpi[1] * dpi[1];
                let kx = kk.at(k1, i);
                LinearTerms {
                    r: gf[0] * kx + quad(&hf, dpi),
                    lambda: gf[1],
                    gamma: gf[2],
                    h: gg[0] * kx + qg,
                    beta: gg[1],
                    delta: gg[2],
                }
            });
            spec.n_features = 2;
            spec.features = Box::new(move |k, i, out| {
                out[0] = j.at(k, i) * j.at(k, i);
                out[1] = kk.at(k, i);
            });
            solve_linear_bdsde(&spec, &forward.grid, x, &forward.pilot_w, &fzr.sol.b, reg)
        })
        .collect::<Result<Vec<_>>>()?;

    let (Some(dm), Some(vp), Some(vl)) = (&tangents.dmu, &second.dydmu, &second.law_dydmu) else {
        return Ok(SecondOrderBackward { dxx, dydmu: None });
    };
    check_measure(&fz)?;
    need(coeffs.jac_dmu_f([0.0; 3], law0, [0.0; 3]), "jac_dmu_f")?;
    need(coeffs.jac_dmu_g([0.0; 3], law0, [0.0; 3]), "jac_dmu_g")?;
    need(coeffs.jac_dmu_h(law0, [0.0; 3]), "jac_dmu_h")?;
    need(coeffs.dy_dmu_phi(0.0, mu_t, 0.0), "dy_dmu_phi")?;
    let yp = dm.y_pilot;
    let (xy, by) = fz.pilot(yp);
    let jy = &tangents.dx[yp];
    let ky = &second.dxx[yp];
    let d1 = &dx[yp];
    let d2 = &dxx[yp];
    let mut hat = MeasureTerms { drift: vec![0.0; n + 1], backward: vec![0.0; n + 1], terminal: 0.0 };
    for k in 0..=n {
        let law = &fz.laws[k];
        let parts = |m: usize, i: usize| {
            let h = triple(xy, by, k, m, i);
            let v1 = [jy.at(k, i), d1.y.at(k, m, i), d1.z.at(k, m, i)];
            let v2 = [ky.at(k, i), d2.y.at(k, m, i), d2.z.at(k, m, i)];
            (h, v1, v2)
        };
        hat.drift[k] = fz.pooled(|m, i| {
            let (h, v1, v2) = parts(m, i);
            quad(&coeffs.jac_dmu_f(h, law, h).unwrap(), v1) + dot(coeffs.dmu_f(h, law, h).unwrap(), v2)
        });
        hat.backward[k] = fz.pooled(|m, i| {
            let (h, v1, v2) = parts(m, i);
            let (ja, jb) = (coeffs.jac_dmu_g(h, law, h).unwrap(), coeffs.jac_dmu_h(law, h).unwrap());
            let mut jac = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    jac[a][b] = ja[a][b] + jb[a][b];
                }
            }
            let (a, b) = (coeffs.dmu_g(h, law, h).unwrap(), coeffs.dmu_h(law, h).unwrap());
            quad(&jac, v1) + dot([a[0] + b[0], a[1] + b[1], a[2] + b[2]], v2)
        });
    }
    hat.terminal = (0..xy.n_paths)
        .map(|i| {
            let xt = xy.at(n, i);
            coeffs.dy_dmu_phi(0.0, mu_t, xt).unwrap() * jy.at(n, i).powi(2) + coeffs.dmu_phi(0.0, mu_t, xt).unwrap() * ky.at(n, i)
        })
        .sum::<f64>()
        / xy.n_paths as f64;
    let (law, pilots) = measure_system(&fz, &hat, vl, vp, reg)?;
    Ok(SecondOrderBackward { dxx, dydmu: Some(DmuBackward { y: dm.y, law, pilots }) })
}
