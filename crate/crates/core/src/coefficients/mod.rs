//! Coefficient model, assumption budget and validation, scenario catalog.

mod catalog;
mod scenario;
mod validate;

pub use catalog::{builtin_scenarios, coefficients_by_name, ClosedFormOracle, Model};
pub use scenario::{LawSampler, ScenarioSpec};
pub use validate::{validate_assumptions, Budget, ValidationReport, RatioEntry};

use crate::measures::EmpiricalMeasure;

/// A point `(x, y, z)` of the state space of `Π = (X, Y, Z)` in dimension one.
pub type Triple = [f64; 3];

/// Coefficients `b, σ, f, g, h, Φ` and their analytically supplied derivatives.
///
/// Base evaluators work in any dimension `d` (state) and `l` (backward noise).
/// The law argument of `f, g, h` is the empirical law of `Π` with atoms laid out
/// as `(x[0..d], y, z[0..d])`; `b, σ, Φ` receive the law of `X`.
///
/// Derivative evaluators return `None` when not supplied. Measure and second-order
/// derivatives are scalar and used by the one-dimensional (`d = l = 1`) derivative solvers.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn b(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// Row-major `d×d` diffusion matrix.
    fn sigma(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn f(&self, x: &[f64], y: f64, z: &[f64], law: &EmpiricalMeasure) -> f64;
    fn g(&self, x: &[f64], y: f64, z: &[f64], law: &EmpiricalMeasure, out: &mut [f64]);
    fn h(&self, law: &EmpiricalMeasure, out: &mut [f64]);
    fn phi(&self, x: &[f64], mu_x: &EmpiricalMeasure) -> f64;

    /// Whether `g(x, y, z, μ) = g1(x, y, μ) + g2(μ_X)·z`.
    fn affine_g(&self) -> bool {
        false
    }
    /// `g1(x, y, μ)` in `ℝ^l`.
    fn g1(&self, _x: &[f64], _y: f64, _law: &EmpiricalMeasure) -> Option<Vec<f64>> {
        None
    }
    /// `g2(μ_X)` as a row-major `l×d` matrix; receives the law of `Π`.
    fn g2(&self, _law: &EmpiricalMeasure) -> Option<Vec<f64>> {
        None
    }

    /// Whether every Lions derivative is independent of the evaluation point
    /// `(x, y, z)` (it may still depend on the hat point and the law).
    fn lions_own_independent(&self) -> bool {
        false
    }
    /// Whether `f, g, h` depend on the law of `Π`.
    fn pi_law_dependent(&self) -> bool {
        true
    }

    /// `∂b_j/∂x_m` as row-major `d×d`.
    fn dx_b(&self, _x: &[f64], _mu: &EmpiricalMeasure) -> Option<Vec<f64>> {
        None
    }
    /// `∂σ_{jl}/∂x_m` laid out `[j][l][m]`.
    fn dx_sigma(&self, _x: &[f64], _mu: &EmpiricalMeasure) -> Option<Vec<f64>> {
        None
    }
    fn dmu_b(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }
    fn dmu_sigma(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }
    fn dxx_b(&self, _x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        None
    }
    fn dxx_sigma(&self, _x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        None
    }
    /// `∂_ŷ ∂_μ b(x, μ, ŷ)`.
    fn dy_dmu_b(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }
    fn dy_dmu_sigma(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }

    fn dx_phi(&self, _x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        None
    }
    fn dxx_phi(&self, _x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        None
    }
    fn dmu_phi(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }
    fn dy_dmu_phi(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        None
    }

    /// `(∂_x f, ∂_y f, ∂_z f)`.
    fn grad_f(&self, _p: Triple, _law: &EmpiricalMeasure) -> Option<Triple> {
        None
    }
    /// Hessian of `f` in `(x, y, z)`.
    fn hess_f(&self, _p: Triple, _law: &EmpiricalMeasure) -> Option<[Triple; 3]> {
        None
    }
    /// `(∂_x g, ∂_y g, ∂_z g)` for `l = 1`.
    fn grad_g(&self, _p: Triple, _law: &EmpiricalMeasure) -> Option<Triple> {
        None
    }
    /// Hessian of `g1` in `(x, y)`.
    fn hess_g1(&self, _x: f64, _y: f64, _law: &EmpiricalMeasure) -> Option<[[f64; 2]; 2]> {
        None
    }
    /// `∂_μ f(p, μ, p̂)` with components along `(x̂, ŷ, ẑ)`.
    fn dmu_f(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<Triple> {
        None
    }
    fn dmu_g(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<Triple> {
        None
    }
    fn dmu_h(&self, _law: &EmpiricalMeasure, _hat: Triple) -> Option<Triple> {
        None
    }
    /// Jacobian `[c][c'] = ∂_{p̂_c'} (∂_μ f)_c`.
    fn jac_dmu_f(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        None
    }
    fn jac_dmu_g(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        None
    }
    fn jac_dmu_h(&self, _law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        None
    }
}

/// Evaluates `g + h` into `out`.
pub fn g_plus_h<C: Coefficients + ?Sized>(c: &C, x: &[f64], y: f64, z: &[f64], law: &EmpiricalMeasure, h: &[f64], out: &mut [f64]) {
    c.g(x, y, z, law, out);
    out.iter_mut().zip(h).for_each(|(o, hv)| *o += hv);
}
