//! Euler particle solver for the split mean-field SDE and its tangent,
//! measure-derivative, second-order and Malliavin processes.

use crate::coefficients::{Coefficients, ScenarioSpec};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::paths::{Increments, PathBundle, TimeGrid};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Hat-copy subsample size used when a Lions derivative depends on its own point.
pub const HAT_CAP: usize = 256;

/// Per-node arrays laid out as `[node][path][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeArray {
    pub n_nodes: usize,
    pub n_paths: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl NodeArray {
    pub fn zeros(n_nodes: usize, n_paths: usize, width: usize) -> Self {
        Self { n_nodes, n_paths, width, data: vec![0.0; n_nodes * n_paths * width] }
    }

    pub fn get(&self, node: usize, path: usize) -> &[f64] {
        let o = (node * self.n_paths + path) * self.width;
        &self.data[o..o + self.width]
    }

    pub fn get_mut(&mut self, node: usize, path: usize) -> &mut [f64] {
        let o = (node * self.n_paths + path) * self.width;
        &mut self.data[o..o + self.width]
    }

    /// First component at `(node, path)`.
    pub fn at(&self, node: usize, path: usize) -> f64 {
        self.data[(node * self.n_paths + path) * self.width]
    }

    /// All paths at one node.
    pub fn slab(&self, node: usize) -> &[f64] {
        let w = self.n_paths * self.width;
        &self.data[node * w..(node + 1) * w]
    }

    /// Node values of one component along one path.
    pub fn series(&self, path: usize, comp: usize) -> Vec<f64> {
        (0..self.n_nodes).map(|k| self.get(k, path)[comp]).collect()
    }

    /// Copy of the nodes from `start` on.
    pub fn tail(&self, start: usize) -> Self {
        let w = self.n_paths * self.width;
        Self { n_nodes: self.n_nodes - start, n_paths: self.n_paths, width: self.width, data: self.data[start * w..].to_vec() }
    }

    /// Immutable node `k` and mutable node `k + 1`.
    pub fn split_nodes(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let w = self.n_paths * self.width;
        let (a, b) = self.data.split_at_mut((k + 1) * w);
        (&a[k * w..], &mut b[..w])
    }

    /// Mean of the first component at one node.
    pub fn node_mean(&self, node: usize) -> f64 {
        (0..self.n_paths).map(|p| self.at(node, p)).sum::<f64>() / self.n_paths as f64
    }
}

/// Which forward noise drives the pilot paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotNoise {
    /// A stream independent of the law particles.
    Independent,
    /// The law particles' own increments.
    Shared,
}

/// `N` paths of the decoupled equation started at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub start: Vec<f64>,
    pub paths: NodeArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCloud {
    pub grid: TimeGrid,
    pub d: usize,
    pub law: NodeArray,
    /// Node-`k` empirical law of the law particles.
    pub law_flow: Vec<EmpiricalMeasure>,
    pub law_w: Increments,
    pub pilots: Vec<Pilot>,
    pub pilot_w: Increments,
    pub noise: PilotNoise,
}

impl ForwardCloud {
    pub fn n_particles(&self) -> usize {
        self.law.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    /// Index of the pilot started at `x`, if any.
    pub fn pilot_index(&self, x: &[f64]) -> Option<usize> {
        self.pilots.iter().position(|p| p.start == x)
    }

    pub fn pilot(&self, x: &[f64]) -> Result<&Pilot> {
        self.pilot_index(x).map(|i| &self.pilots[i]).ok_or_else(|| Error::Config(format!("no pilot started at {x:?}")))
    }

    pub fn terminal_law(&self) -> &EmpiricalMeasure {
        self.law_flow.last().expect("nonempty flow")
    }
}

/// One Euler step for every path: `next = cur + b Δ + σ ΔW`.
fn euler_step<C: Coefficients + ?Sized>(
    coeffs: &C,
    d: usize,
    mu: &EmpiricalMeasure,
    dt: f64,
    k: usize,
    w: &Increments,
    cur: &[f64],
    next: &mut [f64],
) -> Result<()> {
    next.par_chunks_mut(d).enumerate().for_each(|(p, out)| {
        let x = &cur[p * d..(p + 1) * d];
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * d];
        coeffs.b(x, mu, &mut b);
        coeffs.sigma(x, mu, &mut s);
        let dw = w.get(p, k);
        for j in 0..d {
            let mut v = x[j] + b[j] * dt;
            for l in 0..d {
                v += s[j * d + l] * dw[l];
            }
            out[j] = v;
        }
    });
    if next.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonfiniteState { node: k + 1 })
    }
}

fn measure_at(arr: &NodeArray, k: usize) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::new(arr.slab(k).to_vec(), arr.width).map_err(|_| Error::NonfiniteState { node: k })
}

fn run_paths<C: Coefficients + ?Sized>(
    coeffs: &C,
    grid: &TimeGrid,
    flow: &[EmpiricalMeasure],
    init: &[f64],
    d: usize,
    w: &Increments,
) -> Result<NodeArray> {
    let n = init.len() / d;
    let mut arr = NodeArray::zeros(grid.n_nodes(), n, d);
    arr.data[..n * d].copy_from_slice(init);
    for k in 0..grid.n_steps() {
        let (cur, next) = arr.split_nodes(k);
        euler_step(coeffs, d, &flow[k], grid.steps()[k], k, w, cur, next)?;
    }
    Ok(arr)
}

/// Solves the law system from `law_init` (`[N][d]`) first, then every pilot against
/// the frozen flow. Each pilot is `(start label, initial states [N][d])`.
pub fn solve_split_sde_with<C: Coefficients + ?Sized>(
    coeffs: &C,
    law_init: &[f64],
    pilot_inits: &[(Vec<f64>, Vec<f64>)],
    bundle: &PathBundle,
    noise: PilotNoise,
) -> Result<ForwardCloud> {
    let d = coeffs.dim();
    if bundle.d != d {
        return Err(Error::DimMismatch(bundle.d, d));
    }
    let n = bundle.n_particles;
    if law_init.len() != n * d {
        return Err(Error::LengthMismatch { expected: n * d, got: law_init.len() });
    }
    let grid = &bundle.grid;
    let mut law = NodeArray::zeros(grid.n_nodes(), n, d);
    law.data[..n * d].copy_from_slice(law_init);
    let mut law_flow = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_steps() {
        let mu = measure_at(&law, k)?;
        let (cur, next) = law.split_nodes(k);
        euler_step(coeffs, d, &mu, grid.steps()[k], k, &bundle.w, cur, next)?;
        law_flow.push(mu);
    }
    law_flow.push(measure_at(&law, grid.n_steps())?);

    let pilot_w = match noise {
        PilotNoise::Independent => bundle.pilot_w(),
        PilotNoise::Shared => bundle.w.clone(),
    };
    let pilots = pilot_inits
        .iter()
        .map(|(start, init)| {
            if init.len() != n * d {
                return Err(Error::LengthMismatch { expected: n * d, got: init.len() });
            }
            Ok(Pilot { start: start.clone(), paths: run_paths(coeffs, grid, &law_flow, init, d, &pilot_w)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardCloud { grid: grid.clone(), d, law, law_flow, law_w: bundle.w.clone(), pilots, pilot_w, noise })
}

/// Draws the initial law from the scenario sampler and solves with one pilot per
/// deterministic start, each driven by the independent pilot stream.
pub fn solve_split_sde<C: Coefficients + ?Sized>(
    coeffs: &C,
    spec: &ScenarioSpec,
    bundle: &PathBundle,
    pilot_starts: &[Vec<f64>],
) -> Result<ForwardCloud> {
    let init = spec.law.draw(bundle.n_particles, coeffs.dim(), bundle.seed);
    solve_from_starts(coeffs, &init, bundle, pilot_starts)
}

/// As [`solve_split_sde`] with an explicit initial law sample.
pub fn solve_from_starts<C: Coefficients + ?Sized>(
    coeffs: &C,
    law_init: &[f64],
    bundle: &PathBundle,
    pilot_starts: &[Vec<f64>],
) -> Result<ForwardCloud> {
    let n = bundle.n_particles;
    let inits: Vec<(Vec<f64>, Vec<f64>)> = pilot_starts.iter().map(|x| (x.clone(), x.repeat(n))).collect();
    solve_split_sde_with(coeffs, law_init, &inits, bundle, PilotNoise::Independent)
}

/// Restarts at node `s` from the node-`s` states of `cloud` with the same remaining
/// increments of `bundle` (the bundle the cloud was built from).
pub fn restart<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud, bundle: &PathBundle, s: usize) -> Result<ForwardCloud> {
    let tail = bundle.tail(s)?;
    let inits: Vec<(Vec<f64>, Vec<f64>)> = cloud.pilots.iter().map(|p| (p.start.clone(), p.paths.slab(s).to_vec())).collect();
    solve_split_sde_with(coeffs, cloud.law.slab(s), &inits, &tail, cloud.noise)
}

/// `∂ₓX` per pilot (entries `[j][i] = ∂_{x_i} X^j`), and optionally `∂_μX(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCloud {
    pub dx: Vec<NodeArray>,
    pub dmu: Option<DmuCloud>,
}

/// `∂_μX(y)`: the self-consistent law system `U^ξ(y)` and `U^x(y)` per pilot.
#[derive(Debug, Clone, PartialEq)]
pub struct DmuCloud {
    pub y: f64,
    pub y_pilot: usize,
    pub law_u: NodeArray,
    pub pilot_u: Vec<NodeArray>,
}

fn check_dx<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud) -> Result<()> {
    let x0 = vec![0.0; cloud.d];
    coeffs.dx_b(&x0, &cloud.law_flow[0]).ok_or(Error::MissingDerivative("dx_b"))?;
    coeffs.dx_sigma(&x0, &cloud.law_flow[0]).ok_or(Error::MissingDerivative("dx_sigma"))?;
    Ok(())
}

/// Runs `M_{k+1} = (I + ∂ₓb Δ + Σ_l ∂ₓσ_{·l} ΔW^l) M_k` from node `start`, zero before it.
fn linear_matrix_flow<C: Coefficients + ?Sized>(
    coeffs: &C,
    cloud: &ForwardCloud,
    paths: &NodeArray,
    start: usize,
    init: impl Fn(usize) -> Vec<f64>,
) -> Result<NodeArray> {
    let d = cloud.d;
    let n = paths.n_paths;
    let mut out = NodeArray::zeros(paths.n_nodes, n, d * d);
    for p in 0..n {
        out.get_mut(start, p).copy_from_slice(&init(p));
    }
    for k in start..cloud.grid.n_steps() {
        let dt = cloud.grid.steps()[k];
        let mu = &cloud.law_flow[k];
        let (cur, next) = out.split_nodes(k);
        next.par_chunks_mut(d * d).enumerate().for_each(|(p, nx)| {
            let x = paths.get(k, p);
            let bx = coeffs.dx_b(x, mu).expect("checked");
            let sx = coeffs.dx_sigma(x, mu).expect("checked");
            let dw = cloud.pilot_w.get(p, k);
            let m = &cur[p * d * d..(p + 1) * d * d];
            for j in 0..d {
                for i in 0..d {
                    let mut v = m[j * d + i];
                    for r in 0..d {
                        let mut a = bx[j * d + r] * dt;
                        for l in 0..d {
                            a += sx[(j * d + l) * d + r] * dw[l];
                        }
                        v += a * m[r * d + i];
                    }
                    nx[j * d + i] = v;
                }
            }
        });
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonfiniteState { node: k + 1 });
        }
    }
    Ok(out)
}

/// Solves the tangent equation along every pilot, reusing each pilot's increments.
pub fn solve_dx<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud) -> Result<TangentCloud> {
    check_dx(coeffs, cloud)?;
    let d = cloud.d;
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let dx = cloud
        .pilots
        .iter()
        .map(|p| linear_matrix_flow(coeffs, cloud, &p.paths, 0, |_| eye.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TangentCloud { dx, dmu: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinForwardCloud {
    pub theta: usize,
    /// One array per pilot; entries `[j][i] = D^i_θ X^j`.
    pub d_theta: Vec<NodeArray>,
}

/// `D_θX`: zero before node `θ`, `σ(X_θ, μ_θ)` at `θ`, then the tangent recursion.
pub fn solve_malliavin_forward<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud, theta: usize) -> Result<MalliavinForwardCloud> {
    let last = cloud.grid.n_steps();
    if theta > last {
        return Err(Error::ThetaOffGrid { theta, last });
    }
    check_dx(coeffs, cloud)?;
    let d = cloud.d;
    let mu = &cloud.law_flow[theta];
    let d_theta = cloud
        .pilots
        .iter()
        .map(|p| {
            linear_matrix_flow(coeffs, cloud, &p.paths, theta, |i| {
                let mut s = vec![0.0; d * d];
                coeffs.sigma(p.paths.get(theta, i), mu, &mut s);
                s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MalliavinForwardCloud { theta, d_theta })
}

/// Largest relative gap between `D_θX_s` and `∂ₓX_s (∂ₓX_θ)^{-1} σ(X_θ, μ_θ)` over nodes `s ≥ θ`.
pub fn malliavin_product_gap<C: Coefficients + ?Sized>(
    coeffs: &C,
    cloud: &ForwardCloud,
    tangents: &TangentCloud,
    mall: &MalliavinForwardCloud,
    pilot: usize,
) -> f64 {
    let d = cloud.d;
    let th = mall.theta;
    let paths = &cloud.pilots[pilot].paths;
    let dx = &tangents.dx[pilot];
    let dm = &mall.d_theta[pilot];
    (0..paths.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut s = vec![0.0; d * d];
            coeffs.sigma(paths.get(th, p), &cloud.law_flow[th], &mut s);
            let Some(inv) = DMatrix::from_row_slice(d, d, dx.get(th, p)).try_inverse() else {
                return f64::INFINITY;
            };
            let sig = DMatrix::from_row_slice(d, d, &s);
            let mut worst: f64 = 0.0;
            for k in th..paths.n_nodes {
                let prod = DMatrix::from_row_slice(d, d, dx.get(k, p)) * &inv * &sig;
                let dk = DMatrix::from_row_slice(d, d, dm.get(k, p));
                let scale = dk.norm().max(prod.norm()).max(1e-300);
                worst = worst.max((&prod - &dk).norm() / scale);
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Average of `f(j)` over `0..n`, or over a deterministic stride subsample of size `cap`.
pub(crate) fn hat_mean(n: usize, cap: usize, f: impl Fn(usize) -> f64) -> f64 {
    if n <= cap {
        (0..n).map(&f).sum::<f64>() / n as f64
    } else {
        (0..cap).map(|j| f(j * n / cap)).sum::<f64>() / cap as f64
    }
}

pub(crate) fn require_scalar(d: usize, l: usize) -> Result<()> {
    if d != 1 || l != 1 {
        return Err(Error::Unsupported(format!("measure and second-order derivative solvers need d = l = 1, got d = {d}, l = {l}")));
    }
    Ok(())
}

fn check_first_order<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud) -> Result<()> {
    require_scalar(cloud.d, coeffs.noise_dim())?;
    check_dx(coeffs, cloud)?;
    let mu = &cloud.law_flow[0];
    coeffs.dmu_b(0.0, mu, 0.0).ok_or(Error::MissingDerivative("dmu_b"))?;
    coeffs.dmu_sigma(0.0, mu, 0.0).ok_or(Error::MissingDerivative("dmu_sigma"))?;
    Ok(())
}

/// Scalar linear flow `V_{k+1} = V_k + (∂ₓb V_k + A_b)Δ + (∂ₓσ V_k + A_σ)ΔW`
/// along `own`, where `additive(k, x)` returns `(A_b, A_σ)` for own state `x`
/// and may read any array up to node `k`. With own-independent Lions derivatives
/// the additive term is evaluated once per node.
fn scalar_flow<C: Coefficients + ?Sized>(
    coeffs: &C,
    cloud: &ForwardCloud,
    own: &NodeArray,
    own_w: &Increments,
    init: f64,
    mut additive: impl FnMut(usize, &[f64]) -> Vec<(f64, f64)>,
) -> NodeArray {
    let n = own.n_paths;
    let mut out = NodeArray::zeros(own.n_nodes, n, 1);
    out.data[..n].iter_mut().for_each(|v| *v = init);
    for k in 0..cloud.grid.n_steps() {
        let dt = cloud.grid.steps()[k];
        let mu = &cloud.law_flow[k];
        let add = additive(k, out.slab(k));
        let (cur, next) = out.split_nodes(k);
        next.par_iter_mut().enumerate().for_each(|(p, nx)| {
            let x = own.at(k, p);
            let (ab, asg) = if add.len() == 1 { add[0] } else { add[p] };
            let bx = coeffs.dx_b(&[x], mu).expect("checked")[0];
            let sx = coeffs.dx_sigma(&[x], mu).expect("checked")[0];
            let u = cur[p];
            *nx = u + (bx * u + ab) * dt + (sx * u + asg) * own_w.get(p, k)[0];
        });
    }
    out
}

/// Evaluates `(E[∂_μb(x, μ, X̂) Ĝ], E[∂_μσ(x, μ, X̂) Ĝ])` summed over the listed
/// `(hat states, hat weights)` clouds, for each own state (or once if own-independent).
fn lions_terms<C: Coefficients + ?Sized>(
    coeffs: &C,
    mu: &EmpiricalMeasure,
    own: &[f64],
    clouds: &[(&[f64], &[f64])],
    dmu_b: impl Fn(&C, f64, &EmpiricalMeasure, f64) -> f64 + Sync,
    dmu_s: impl Fn(&C, f64, &EmpiricalMeasure, f64) -> f64 + Sync,
) -> Vec<(f64, f64)> {
    let shared = coeffs.lions_own_independent();
    let cap = if shared { usize::MAX } else { HAT_CAP };
    let eval = |x: f64| {
        let mut ab = 0.0;
        let mut asg = 0.0;
        for (xs, ws) in clouds {
            ab += hat_mean(xs.len(), cap, |j| dmu_b(coeffs, x, mu, xs[j]) * ws[j]);
            asg += hat_mean(xs.len(), cap, |j| dmu_s(coeffs, x, mu, xs[j]) * ws[j]);
        }
        (ab, asg)
    };
    if shared {
        vec![eval(own[0])]
    } else {
        own.par_iter().map(|&x| eval(x)).collect()
    }
}

fn dmu_b_of<C: Coefficients + ?Sized>(c: &C, x: f64, mu: &EmpiricalMeasure, hat: f64) -> f64 {
    c.dmu_b(x, mu, hat).expect("checked")
}

fn dmu_s_of<C: Coefficients + ?Sized>(c: &C, x: f64, mu: &EmpiricalMeasure, hat: f64) -> f64 {
    c.dmu_sigma(x, mu, hat).expect("checked")
}

/// Two-stage measure-derivative solve at query point `y`: first the law system
/// `U^ξ(y)` over the law particles, then `U^x(y)` along every pilot. The cloud
/// must hold a pilot started at `y` whose tangent is in `tangents`.
pub fn solve_dmu<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud, tangents: &TangentCloud, y: f64) -> Result<TangentCloud> {
    check_first_order(coeffs, cloud)?;
    let yp = cloud.pilot_index(&[y]).ok_or_else(|| Error::Config(format!("no pilot started at y = {y}")))?;
    let xy = &cloud.pilots[yp].paths;
    let jy = &tangents.dx[yp];

    let law_u = scalar_flow(coeffs, cloud, &cloud.law, &cloud.law_w, 0.0, |k, uk| {
        let clouds = [(xy.slab(k), jy.slab(k)), (cloud.law.slab(k), uk)];
        lions_terms(coeffs, &cloud.law_flow[k], cloud.law.slab(k), &clouds, dmu_b_of, dmu_s_of)
    });
    let pilot_u = cloud
        .pilots
        .iter()
        .map(|pl| {
            scalar_flow(coeffs, cloud, &pl.paths, &cloud.pilot_w, 0.0, |k, _| {
                let clouds = [(xy.slab(k), jy.slab(k)), (cloud.law.slab(k), law_u.slab(k))];
                lions_terms(coeffs, &cloud.law_flow[k], pl.paths.slab(k), &clouds, dmu_b_of, dmu_s_of)
            })
        })
        .collect();
    Ok(TangentCloud { dx: tangents.dx.clone(), dmu: Some(DmuCloud { y, y_pilot: yp, law_u, pilot_u }) })
}

/// Second-order forward derivatives obtained by differentiating the tangent and
/// measure-derivative equations once more.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderCloud {
    /// `∂²ₓₓX` per pilot.
    pub dxx: Vec<NodeArray>,
    /// `∂_y ∂_μX(y)` per pilot, when the tangents carry a measure derivative.
    pub dydmu: Option<Vec<NodeArray>>,
    /// Law-particle system of `∂_y ∂_μX^ξ(y)`.
    pub law_dydmu: Option<NodeArray>,
}

/// `∂²ₓₓX` along every pilot and, if `tangents.dmu` is present, `∂_y∂_μX(y)`.
pub fn solve_second_order<C: Coefficients + ?Sized>(coeffs: &C, cloud: &ForwardCloud, tangents: &TangentCloud) -> Result<SecondOrderCloud> {
    require_scalar(cloud.d, coeffs.noise_dim())?;
    check_dx(coeffs, cloud)?;
    let mu0 = &cloud.law_flow[0];
    coeffs.dxx_b(0.0, mu0).ok_or(Error::MissingDerivative("dxx_b"))?;
    coeffs.dxx_sigma(0.0, mu0).ok_or(Error::MissingDerivative("dxx_sigma"))?;

    let dxx = cloud
        .pilots
        .iter()
        .zip(&tangents.dx)
        .map(|(pl, j)| {
            scalar_flow(coeffs, cloud, &pl.paths, &cloud.pilot_w, 0.0, |k, _| {
                let mu = &cloud.law_flow[k];
                (0..pl.paths.n_paths)
                    .map(|p| {
                        let x = pl.paths.at(k, p);
                        let j2 = j.at(k, p) * j.at(k, p);
                        (coeffs.dxx_b(x, mu).unwrap() * j2, coeffs.dxx_sigma(x, mu).unwrap() * j2)
                    })
                    .collect()
            })
        })
        .collect::<Vec<_>>();

    let Some(dm) = &tangents.dmu else {
        return Ok(SecondOrderCloud { dxx, dydmu: None, law_dydmu: None });
    };
    check_first_order(coeffs, cloud)?;
    coeffs.dy_dmu_b(0.0, mu0, 0.0).ok_or(Error::MissingDerivative("dy_dmu_b"))?;
    coeffs.dy_dmu_sigma(0.0, mu0, 0.0).ok_or(Error::MissingDerivative("dy_dmu_sigma"))?;
    let yp = dm.y_pilot;
    let xy = &cloud.pilots[yp].paths;
    let jy = &tangents.dx[yp];
    let ky = &dxx[yp];
    // Hat weights for the derivative in the hat argument: (∂ₓX^y)² paired with ∂_ŷ∂_μ.
    let jy2 = NodeArray { data: jy.data.iter().map(|v| v * v).collect(), ..jy.clone() };
    let dy_b = |c: &C, x: f64, mu: &EmpiricalMeasure, hat: f64| c.dy_dmu_b(x, mu, hat).expect("checked");
    let dy_s = |c: &C, x: f64, mu: &EmpiricalMeasure, hat: f64| c.dy_dmu_sigma(x, mu, hat).expect("checked");
    let additive = |k: usize, own: &[f64], law_v: &[f64]| -> Vec<(f64, f64)> {
        let mu = &cloud.law_flow[k];
        let a = lions_terms(coeffs, mu, own, &[(xy.slab(k), jy2.slab(k))], dy_b, dy_s);
        let b = lions_terms(coeffs, mu, own, &[(xy.slab(k), ky.slab(k)), (cloud.law.slab(k), law_v)], dmu_b_of, dmu_s_of);
        a.iter().zip(&b).map(|(p, q)| (p.0 + q.0, p.1 + q.1)).collect()
    };
    let law_v = scalar_flow(coeffs, cloud, &cloud.law, &cloud.law_w, 0.0, |k, vk| additive(k, cloud.law.slab(k), vk));
    let dydmu = cloud
        .pilots
        .iter()
        .map(|pl| scalar_flow(coeffs, cloud, &pl.paths, &cloud.pilot_w, 0.0, |k, _| additive(k, pl.paths.slab(k), law_v.slab(k))))
        .collect();
    Ok(SecondOrderCloud { dxx, dydmu: Some(dydmu), law_dydmu: Some(law_v) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{coefficients_by_name, LawSampler, Model};
    use crate::paths::{make_grid, sample_paths, Seed};

    fn bundle(n: usize, steps: usize) -> PathBundle {
        sample_paths(&make_grid(0.0, 1.0, steps).unwrap(), 1, 1, n, 2, Seed::new(11))
    }

    #[test]
    fn constant_coefficients_are_exact() {
        let m = Model { s0: 0.7, ..Default::default() };
        let b = bundle(64, 16);
        let cloud = solve_from_starts(&m, &vec![0.0; 64], &b, &[vec![0.3]]).unwrap();
        let p = &cloud.pilots[0].paths;
        for i in 0..64 {
            let w = cloud.pilot_w.cumulative(i, 0);
            for k in 0..17 {
                assert!((p.at(k, i) - (0.3 + 0.7 * w[k])).abs() < 1e-12);
            }
        }
        let frozen = solve_from_starts(&Model::default(), &vec![1.5; 64], &b, &[vec![0.3]]).unwrap();
        assert!(frozen.pilots[0].paths.data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn mean_drift_follows_exponential() {
        let m = Model { b3: 1.0, ..Default::default() };
        let b = bundle(32, 256);
        let cloud = solve_from_starts(&m, &vec![1.0; 32], &b, &[]).unwrap();
        let err = (cloud.law.at(256, 0) - 1f64.exp()).abs();
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn linear_vol_tangent_is_ratio() {
        let m = coefficients_by_name("linear-vol").unwrap();
        let b = bundle(64, 32);
        let cloud = solve_from_starts(&m, &vec![1.0; 64], &b, &[vec![0.8]]).unwrap();
        let t = solve_dx(&m, &cloud).unwrap();
        for k in 0..33 {
            for i in 0..64 {
                let r = cloud.pilots[0].paths.at(k, i) / 0.8;
                assert!((t.dx[0].at(k, i) - r).abs() < 1e-12 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn measure_derivative_of_mean_drift() {
        let m = Model { b3: 1.0, s0: 1.0, ..Default::default() };
        let b = bundle(256, 128);
        let cloud = solve_from_starts(&m, &vec![0.1; 256], &b, &[vec![0.5], vec![-0.2]]).unwrap();
        let t = solve_dx(&m, &cloud).unwrap();
        let t = solve_dmu(&m, &cloud, &t, -0.2).unwrap();
        let u = &t.dmu.as_ref().unwrap().pilot_u[0];
        for k in [32, 64, 128] {
            let s = k as f64 / 128.0;
            assert!((u.at(k, 3) - (s.exp() - 1.0)).abs() < 0.02 * s.exp());
        }
    }

    #[test]
    fn malliavin_zero_before_theta_and_product_formula() {
        let m = coefficients_by_name("S4").unwrap();
        let b = bundle(64, 16);
        let cloud = solve_from_starts(&m, &vec![0.2; 64], &b, &[vec![0.3]]).unwrap();
        let t = solve_dx(&m, &cloud).unwrap();
        let mall = solve_malliavin_forward(&m, &cloud, 5).unwrap();
        assert!(mall.d_theta[0].data[..5 * 64].iter().all(|&v| v == 0.0));
        assert!(malliavin_product_gap(&m, &cloud, &t, &mall, 0) < 1e-10);
        assert!(matches!(solve_malliavin_forward(&m, &cloud, 17), Err(Error::ThetaOffGrid { .. })));
    }

    #[test]
    fn restart_is_bit_exact() {
        let m = coefficients_by_name("S5").unwrap();
        let b = bundle(64, 16);
        let cloud = solve_from_starts(&m, &LawSampler::Gaussian { mean: 0.2, sd: 0.5 }.draw(64, 1, Seed::new(3)), &b, &[vec![0.3]]).unwrap();
        let r = restart(&m, &cloud, &b, 6).unwrap();
        assert_eq!(r.pilots[0].paths, cloud.pilots[0].paths.tail(6));
        assert_eq!(r.law, cloud.law.tail(6));
    }
}
