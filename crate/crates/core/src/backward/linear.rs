//! Generic scalar linear BDSDE
//!
//! ```text
//! Y_s = ξ + ∫ (R + λY + Ê[ζŶ] + γZ + Ê[θẐ]) dr
//!         + ∫ (H + βY + Ê[ηŶ] + δZ + Ê[ρẐ]) dB̄ − ∫ Z dW
//! ```
//!
//! with the hat expectations realized as pooled averages over every sample of
//! the same system. All derivative and Malliavin BDSDEs are instances.

use super::{build_designs, sweep, BField, Field, RegressionConfig};
use crate::error::{Error, Result};
use crate::forward::NodeArray;
use crate::paths::{Increments, TimeGrid};
use std::sync::atomic::{AtomicU64, Ordering};

/// Own coefficients of the linear driver at one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearTerms {
    pub r: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub h: f64,
    pub beta: f64,
    pub delta: f64,
}

/// Hat weights multiplying `Ŷ, Ẑ` inside the pooled expectations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanFieldWeights {
    pub zeta: f64,
    pub theta: f64,
    pub eta: f64,
    pub rho: f64,
}

type SampleFn<'a, T> = Box<dyn Fn(usize, usize, usize) -> T + Sync + 'a>;

/// Coefficients of a scalar linear BDSDE, evaluated lazily per node and sample.
pub struct LinearBdsdeSpec<'a> {
    /// Terminal value for `(bpath, inner)`.
    pub terminal: Box<dyn Fn(usize, usize) -> f64 + Sync + 'a>,
    /// Own coefficients at `(node, bpath, inner)`; nodes are `k + 1` for step `k`.
    pub local: SampleFn<'a, LinearTerms>,
    /// Hat weights at `(node, bpath, inner)` of the hat sample.
    pub mean_field: Option<SampleFn<'a, MeanFieldWeights>>,
    /// Number of tangent regression features and their evaluator at `(node, inner)`.
    pub n_features: usize,
    pub features: Box<dyn Fn(usize, usize, &mut [f64]) + Sync + 'a>,
    /// First node of the solve; the solution is zero before it.
    pub start: usize,
}

impl<'a> LinearBdsdeSpec<'a> {
    /// Spec with zero driver and no features.
    pub fn new(terminal: impl Fn(usize, usize) -> f64 + Sync + 'a) -> Self {
        Self {
            terminal: Box::new(terminal),
            local: Box::new(|_, _, _| LinearTerms::default()),
            mean_field: None,
            n_features: 0,
            features: Box::new(|_, _, _| {}),
            start: 0,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct PooledTerms {
    drift: f64,
    backward: f64,
}

fn fetch_max(a: &AtomicU64, v: f64) {
    a.fetch_max(v.abs().to_bits(), Ordering::Relaxed);
}

/// Solves the linear BDSDE on the population with states `x` (`d = 1`) and
/// forward increments `w`, with backward increments `b`.
pub fn solve_linear_bdsde(
    spec: &LinearBdsdeSpec<'_>,
    grid: &TimeGrid,
    x: &NodeArray,
    w: &Increments,
    b: &Increments,
    reg: &RegressionConfig,
) -> Result<Field> {
    if x.width != 1 || b.dim != 1 {
        return Err(Error::Unsupported("the linear BDSDE engine handles d = l = 1".into()));
    }
    let n = grid.n_steps();
    if spec.start > n {
        return Err(Error::ThetaOffGrid { theta: spec.start, last: n });
    }
    let designs = build_designs(grid, x, w, spec.start.min(n - 1), spec.n_features, spec.features.as_ref(), reg)?;
    let max_delta = AtomicU64::new(0);
    let max_rho = AtomicU64::new(0);
    let mut ctx = |k1: usize, y: &BField, z: &BField| -> Result<PooledTerms> {
        let Some(mf) = &spec.mean_field else { return Ok(PooledTerms::default()) };
        let (mut a, mut c) = (0.0, 0.0);
        for m in 0..y.n_bpaths {
            for i in 0..y.n_inner {
                let wts = mf(k1, m, i);
                fetch_max(&max_rho, wts.rho);
                let (yv, zv) = (y.at(k1, m, i), z.at(k1, m, i));
                a += wts.zeta * yv + wts.theta * zv;
                c += wts.eta * yv + wts.rho * zv;
            }
        }
        let cnt = (y.n_bpaths * y.n_inner) as f64;
        Ok(PooledTerms { drift: a / cnt, backward: c / cnt })
    };
    let driver = |pt: &PooledTerms, k1: usize, m: usize, i: usize, y: f64, z: &[f64], g: &mut [f64]| {
        let t = (spec.local)(k1, m, i);
        fetch_max(&max_delta, t.delta);
        g[0] = t.h + t.beta * y + t.delta * z[0] + pt.backward;
        t.r + t.lambda * y + t.gamma * z[0] + pt.drift
    };
    let start = spec.start;
    let out = if start == n {
        // Only the terminal value is defined.
        let np = x.n_paths;
        let mut y = BField::zeros(n + 1, b.n_paths, np, 1);
        for m in 0..b.n_paths {
            for i in 0..np {
                let o = y.offset(n, m, i);
                y.data[o] = (spec.terminal)(m, i);
            }
        }
        Field { y, z: BField::zeros(n + 1, b.n_paths, np, 1), se_y: vec![0.0; n + 1], se_z: vec![0.0; n + 1], start }
    } else {
        sweep(grid, 1, start, &designs, b, spec.terminal.as_ref(), &mut ctx, &driver)?
    };
    let d2 = f64::from_bits(max_delta.load(Ordering::Relaxed)).powi(2);
    let r2 = f64::from_bits(max_rho.load(Ordering::Relaxed)).powi(2);
    if d2 + r2 >= 1.0 {
        return Err(Error::LinearBudget(format!("max |δ|² + max |ρ|² = {} is not below 1", d2 + r2)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{make_grid, sample_paths, Seed};

    fn pop(n: usize, np: usize, mm: usize) -> (TimeGrid, NodeArray, crate::paths::PathBundle) {
        let grid = make_grid(0.0, 1.0, n).unwrap();
        let b = sample_paths(&grid, 1, 1, np, mm, Seed::new(9));
        let mut x = NodeArray::zeros(n + 1, np, 1);
        for i in 0..np {
            let c = b.w.cumulative(i, 0);
            for k in 0..=n {
                x.get_mut(k, i)[0] = c[k];
            }
        }
        (grid, x, b)
    }

    #[test]
    fn zero_driver_constant_terminal() {
        let (g, x, b) = pop(8, 256, 4);
        let spec = LinearBdsdeSpec::new(|_, _| 2.5);
        let f = solve_linear_bdsde(&spec, &g, &x, &b.w, &b.b, &RegressionConfig::with_degree(1)).unwrap();
        assert!(f.y.data.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(f.z.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_backward_integrand() {
        let (g, x, b) = pop(8, 256, 4);
        let mut spec = LinearBdsdeSpec::new(|_, _| 1.0);
        spec.local = Box::new(|_, _, _| LinearTerms { h: 0.3, ..Default::default() });
        let f = solve_linear_bdsde(&spec, &g, &x, &b.w, &b.b, &RegressionConfig::with_degree(1)).unwrap();
        for m in 0..4 {
            let c = b.b.cumulative(m, 0);
            for k in 0..=8 {
                assert!((f.y.at(k, m, 7) - (1.0 + 0.3 * (c[8] - c[k]))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_field_drift_is_exponential() {
        let (g, x, b) = pop(64, 256, 4);
        let mut spec = LinearBdsdeSpec::new(|_, _| 1.0);
        spec.mean_field = Some(Box::new(|_, _, _| MeanFieldWeights { zeta: -0.7, ..Default::default() }));
        let f = solve_linear_bdsde(&spec, &g, &x, &b.w, &b.b, &RegressionConfig::with_degree(1)).unwrap();
        let want = (-0.7f64).exp();
        assert!((f.y.node_mean(0) - want).abs() < 0.01 * want);
    }

    #[test]
    fn budget_violation() {
        let (g, x, b) = pop(4, 256, 2);
        let mut spec = LinearBdsdeSpec::new(|_, _| 1.0);
        spec.local = Box::new(|_, _, _| LinearTerms { delta: 1.2, ..Default::default() });
        assert!(matches!(solve_linear_bdsde(&spec, &g, &x, &b.w, &b.b, &RegressionConfig::with_degree(1)), Err(Error::LinearBudget(_))));
    }
}
