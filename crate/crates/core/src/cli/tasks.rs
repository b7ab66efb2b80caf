//! The computation behind each subcommand, from a resolved scenario to report rows.

use super::report::ReportRow;
use crate::backward::{solve_mf_bdsde, BackwardSolution};
use crate::coefficients::{builtin_scenarios, coefficients_by_name, ClosedFormOracle, Coefficients, Model, ScenarioSpec};
use crate::error::{Error, Result};
use crate::forward::{restart, solve_split_sde, ForwardCloud};
use crate::paths::{make_grid, sample_paths, PathBundle, Seed};
use crate::verify::{
    check_flow, check_ito, check_representation, eval_value, fit_estimates, forward_sup_moments, mean_se, psi_eta_ladder,
    time_holder_ladder, BdsdeSamples, EstimateFit, QuadraticFunctional, SolverConfig, SpdeGap, ValueRequest,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Steps of the SPDE residual window `[t, t + SPDE_WINDOW·Δt]`.
pub const SPDE_WINDOW: usize = 2;
/// Quantile points of the law of `ξ` for the SPDE measure terms.
pub const SPDE_QUADRATURE: usize = 4;
/// Pass level of the relative RMS SPDE gap on a single window.
pub const SPDE_RELATIVE_TOL: f64 = 0.05;
/// Lags (in steps) of the continuity ladders.
pub const ESTIMATE_LAGS: [usize; 4] = [1, 2, 4, 8];
/// Target and tolerance of every sweep exponent.
pub const SWEEP_TARGET: f64 = 0.5;
pub const SWEEP_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subcommand {
    SimulateForward,
    SolveBdsde,
    CheckIto,
    CheckSpde,
    CheckRepresentation,
    CheckFlow,
    FitEstimates,
    Sweep,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Subcommand::SimulateForward,
        Subcommand::SolveBdsde,
        Subcommand::CheckIto,
        Subcommand::CheckSpde,
        Subcommand::CheckRepresentation,
        Subcommand::CheckFlow,
        Subcommand::FitEstimates,
        Subcommand::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::SimulateForward => "simulate-forward",
            Subcommand::SolveBdsde => "solve-bdsde",
            Subcommand::CheckIto => "check-ito",
            Subcommand::CheckSpde => "check-spde",
            Subcommand::CheckRepresentation => "check-representation",
            Subcommand::CheckFlow => "check-flow",
            Subcommand::FitEstimates => "fit-estimates",
            Subcommand::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// Which resolution parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Dt,
    N,
    M,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(SweepAxis::Dt),
            "N" | "n" => Ok(SweepAxis::N),
            "M" | "m" => Ok(SweepAxis::M),
            _ => Err(Error::Config(format!("sweep axis must be dt, N or M, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub axis: SweepAxis,
    pub ladder: Vec<f64>,
    /// Independent seeds `seed, seed+1, ...` per ladder point.
    pub replicates: usize,
}

impl SweepPlan {
    /// The scenario at one ladder point.
    pub fn at(&self, spec: &ScenarioSpec, v: f64) -> Result<ScenarioSpec> {
        let mut s = spec.clone();
        match self.axis {
            SweepAxis::Dt => s.steps = steps_for_dt(spec, v)?,
            SweepAxis::N => s.inner = positive_count(v, "N")?,
            SweepAxis::M => s.bpaths = positive_count(v, "M")?,
        }
        Ok(s)
    }

    /// Fit abscissa of one ladder point: `Δt`, `1/N` or `1/M`.
    fn scale(&self, spec: &ScenarioSpec) -> f64 {
        match self.axis {
            SweepAxis::Dt => (spec.horizon - spec.t) / spec.steps as f64,
            SweepAxis::N => 1.0 / spec.inner as f64,
            SweepAxis::M => 1.0 / spec.bpaths as f64,
        }
    }
}

/// Step count for a requested `Δt`; the step must divide the horizon.
pub fn steps_for_dt(spec: &ScenarioSpec, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n = ((spec.horizon - spec.t) / dt).round();
    if n < 1.0 || ((spec.horizon - spec.t) / n - dt).abs() > 1e-9 * dt.max(1.0) {
        return Err(Error::Config(format!("dt = {dt} does not divide [{}, {}]", spec.t, spec.horizon)));
    }
    Ok(n as usize)
}

fn positive_count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} ladder entries must be positive integers, got {v}")))
    }
}

/// Closed-form oracle of the scenario's coefficients, with the law mean taken
/// from its own sampler.
pub fn oracle_for(spec: &ScenarioSpec) -> Option<ClosedFormOracle> {
    let (_, o) = builtin_scenarios().into_iter().find(|(s, _)| s.coefficients == spec.coefficients)?;
    match o {
        ClosedFormOracle::None => None,
        ClosedFormOracle::MeanFieldTerminal { sigma0, c, .. } => {
            Some(ClosedFormOracle::MeanFieldTerminal { sigma0, c, law_mean: spec.law.mean() })
        }
        o => Some(o),
    }
}

struct Ctx<'a> {
    spec: &'a ScenarioSpec,
    coeffs: Model,
    bundle: PathBundle,
    cfg: SolverConfig,
    dt: f64,
}

impl<'a> Ctx<'a> {
    fn new(spec: &'a ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let coeffs = coefficients_by_name(&spec.coefficients)
            .ok_or_else(|| Error::Config(format!("unknown coefficients `{}`", spec.coefficients)))?;
        if spec.x.len() != coeffs.dim() {
            return Err(Error::Config(format!("state.x has {} entries, coefficients need {}", spec.x.len(), coeffs.dim())));
        }
        let grid = make_grid(spec.t, spec.horizon, spec.steps)?;
        let dt = grid.steps()[0];
        let bundle = sample_paths(&grid, coeffs.dim(), coeffs.noise_dim(), spec.inner, spec.bpaths, Seed::new(spec.seed));
        Ok(Self { spec, coeffs, bundle, cfg: SolverConfig::from_spec(spec), dt })
    }

    fn row(&self, check: &str, metric: &str, value: f64, se: f64, n_samples: usize, pass: bool) -> ReportRow {
        ReportRow {
            scenario: self.spec.id.clone(),
            check: check.into(),
            metric: metric.into(),
            value,
            se,
            n_samples,
            dt: self.dt,
            n: self.spec.inner,
            m: self.spec.bpaths,
            seed: self.spec.seed,
            pass,
        }
    }

    fn forward(&self) -> Result<ForwardCloud> {
        solve_split_sde(&self.coeffs, self.spec, &self.bundle, &[self.spec.x.clone()])
    }

    fn solve(&self, cloud: &ForwardCloud) -> Result<BackwardSolution> {
        solve_mf_bdsde(&self.coeffs, cloud, &self.bundle, &self.cfg.reg, &self.cfg.picard)
    }

    fn fit_rows(&self, fit: &EstimateFit, out: &mut Vec<ReportRow>) {
        for (j, p) in fit.points.iter().enumerate() {
            out.push(self.row("estimate", &format!("{}.point{j}", fit.id), p.value, p.se, p.n_bpaths, true));
            out.push(self.row("estimate", &format!("{}.scale{j}", fit.id), p.scale, 0.0, 1, true));
        }
        if fit.exponent.is_finite() {
            out.push(self.row("estimate", &format!("{}.exponent", fit.id), fit.exponent, fit.se, fit.points.len(), fit.pass));
        } else {
            let bad = fit.points.iter().filter(|p| !(p.value > 0.0)).count();
            out.push(self.row("estimate", &format!("{}.nonpositive_points", fit.id), bad as f64, 0.0, fit.points.len(), false));
        }
    }
}

/// Runs one subcommand on a resolved scenario.
pub fn run_task(cmd: Subcommand, spec: &ScenarioSpec, sweep: Option<&SweepPlan>) -> Result<Vec<ReportRow>> {
    match cmd {
        Subcommand::Sweep => run_sweep(spec, sweep.ok_or_else(|| Error::Config("sweep needs an axis and a ladder".into()))?),
        _ => {
            let ctx = Ctx::new(spec)?;
            match cmd {
                Subcommand::SimulateForward => simulate_forward(&ctx),
                Subcommand::SolveBdsde => solve_bdsde(&ctx),
                Subcommand::CheckIto => ito(&ctx),
                Subcommand::CheckSpde => spde(&ctx),
                Subcommand::CheckRepresentation => representation(&ctx),
                Subcommand::CheckFlow => flow(&ctx),
                Subcommand::FitEstimates => estimates(&ctx),
                Subcommand::Sweep => unreachable!("handled above"),
            }
        }
    }
}

fn simulate_forward(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let cloud = ctx.forward()?;
    let n = cloud.grid.n_steps();
    let np = cloud.n_particles();
    let law_t: Vec<f64> = (0..np).map(|i| cloud.law.at(n, i)).collect();
    let pilot_t: Vec<f64> = (0..np).map(|i| cloud.pilots[0].paths.at(n, i)).collect();
    let sq: Vec<f64> = law_t.iter().map(|v| v * v).collect();
    let (lm, lse) = mean_se(&law_t);
    let (l2, l2se) = mean_se(&sq);
    let (pm, pse) = mean_se(&pilot_t);
    let mut rows = vec![
        ctx.row("forward", "law_mean_T", lm, lse, np, lm.is_finite()),
        ctx.row("forward", "law_second_moment_T", l2, l2se, np, l2.is_finite()),
        ctx.row("forward", "pilot_mean_T", pm, pse, np, pm.is_finite()),
    ];
    if n >= 2 {
        let re = restart(&ctx.coeffs, &cloud, &ctx.bundle, n / 2)?;
        let mut diff = 0.0f64;
        let mut exact = true;
        for r in 0..=n - n / 2 {
            for (u, v) in cloud.law.slab(n / 2 + r).iter().zip(re.law.slab(r)) {
                exact &= u.to_bits() == v.to_bits();
                diff = diff.max((u - v).abs());
            }
        }
        rows.push(ctx.row("forward", "restart_max_diff", diff, 0.0, np, exact));
    }
    Ok(rows)
}

fn solve_bdsde(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let cloud = ctx.forward()?;
    let sol = ctx.solve(&cloud)?;
    let mm = ctx.spec.bpaths;
    let v = sol.value(&ctx.spec.x)?;
    let (vm, vse) = mean_se(&v);
    let mut rows = vec![
        ctx.row("bdsde", "value_mean", vm, vse, mm, vm.is_finite()),
        ctx.row("bdsde", "picard_iterations", sol.picard_iters as f64, 0.0, 1, sol.converged),
        ctx.row("bdsde", "picard_residual", sol.picard_residual, 0.0, 1, sol.converged),
    ];
    if let Some(o) = oracle_for(ctx.spec) {
        let (y, z) = oracle_rmse(&o, &cloud, &sol)?;
        let c = match o {
            ClosedFormOracle::ConstantBackward { c, .. } | ClosedFormOracle::MeanFieldTerminal { c, .. } => c,
            _ => 0.0,
        };
        let x = ctx.spec.x[0].abs();
        let y_tol = (0.02 * (x + c.abs() * (ctx.spec.horizon - ctx.spec.t).sqrt())).max(ORACLE_FLOOR);
        let z_tol = (0.05 * o.z().unwrap_or(0.0).abs()).max(ORACLE_FLOOR);
        let ns = mm * ctx.spec.inner;
        rows.push(ctx.row("oracle", "y_rmse_max", y, 0.0, ns, y <= y_tol));
        rows.push(ctx.row("oracle", "y_tolerance", y_tol, 0.0, 1, true));
        rows.push(ctx.row("oracle", "z_rmse_max", z, 0.0, ns, z <= z_tol));
        rows.push(ctx.row("oracle", "z_tolerance", z_tol, 0.0, 1, true));
    }
    Ok(rows)
}

/// Absolute floor of the oracle tolerances, for oracles whose scale is zero.
const ORACLE_FLOOR: f64 = 1e-10;

/// Largest nodewise RMS error of the pilot `Y` (nodes `0..=n`) and `Z` (nodes
/// `0..n`) against a closed-form oracle.
pub fn oracle_rmse(o: &ClosedFormOracle, cloud: &ForwardCloud, sol: &BackwardSolution) -> Result<(f64, f64)> {
    let pl = &cloud.pilots[0].paths;
    let f = &sol.pilots[0].field;
    let n = cloud.grid.n_steps();
    let (mm, np) = (f.y.n_bpaths, f.y.n_inner);
    let zo = o.z().ok_or_else(|| Error::Config("oracle has no Z".into()))?;
    let (mut ymax, mut zmax) = (0.0f64, 0.0f64);
    let cum: Vec<Vec<f64>> = (0..mm).map(|m| sol.b.cumulative(m, 0)).collect();
    for k in 0..=n {
        let (mut ys, mut zs) = (0.0, 0.0);
        for (m, bc) in cum.iter().enumerate() {
            for i in 0..np {
                let want = o.y(pl.at(k, i), bc[n] - bc[k]).ok_or_else(|| Error::Config("oracle has no Y".into()))?;
                ys += (f.y.at(k, m, i) - want).powi(2);
                zs += (f.z.at(k, m, i) - zo).powi(2);
            }
        }
        let c = (mm * np) as f64;
        ymax = ymax.max((ys / c).sqrt());
        if k < n {
            zmax = zmax.max((zs / c).sqrt());
        }
    }
    Ok((ymax, zmax))
}

/// `F(t, x, μ) = x² + t·x + ∫y² dμ`
pub const ITO_FUNCTIONAL: QuadraticFunctional = QuadraticFunctional { a: 1.0, b: 1.0, c: 1.0, e: 0.0 };

fn ito(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let cloud = ctx.forward()?;
    let sol = ctx.solve(&cloud)?;
    let yz = BdsdeSamples::from_law(&ctx.coeffs, &cloud, &sol)?;
    let uv = BdsdeSamples::from_pilot(&ctx.coeffs, &cloud, &sol, 0)?;
    let g = check_ito(&ITO_FUNCTIONAL, &yz, &uv, ctx.spec.bpaths)?;
    let pass = g.mean.abs() <= 3.0 * g.se + 1e-12;
    Ok(vec![ctx.row("ito", "gap_mean", g.mean, g.se, g.n_samples, pass)])
}

fn spde(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let k1 = SPDE_WINDOW.min(ctx.spec.steps);
    let g = SpdeGap::between(&ctx.coeffs, &ctx.spec.law, &ctx.spec.x, &ctx.bundle, 0, k1, SPDE_QUADRATURE, &ctx.cfg)?;
    let mm = ctx.spec.bpaths;
    Ok(vec![
        ctx.row("spde", "gap_mean_square", g.mean_square, g.se, mm, g.mean_square.is_finite()),
        ctx.row("spde", "gap_relative", g.relative, 0.0, mm, g.relative <= SPDE_RELATIVE_TOL),
        ctx.row("spde", "window", g.t_end - g.t, 0.0, 1, true),
    ])
}

fn representation(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let v = eval_value(&ctx.coeffs, 0, &ctx.spec.x, &ctx.spec.law, &ctx.bundle, &ctx.cfg, &ValueRequest::first_order().with_trace())?;
    let r = check_representation(&ctx.coeffs, &v)?;
    let mm = ctx.spec.bpaths;
    let mut rows: Vec<ReportRow> = r
        .nodes
        .iter()
        .map(|nr| ctx.row("representation", &format!("residual_node{:04}", nr.node), nr.mean, nr.se, mm, nr.mean <= 3.0 * nr.reg_se))
        .collect();
    let worst = r.nodes.iter().map(|n| n.mean).fold(0.0, f64::max);
    rows.push(ctx.row("representation", "residual_max", worst, 0.0, mm, r.within_regression_error(3.0)));
    Ok(rows)
}

fn flow(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let n = ctx.spec.steps;
    if n < 2 {
        return Err(Error::Config("flow check needs at least two steps".into()));
    }
    let cloud = ctx.forward()?;
    let r = check_flow(&ctx.coeffs, &cloud, &ctx.bundle, n / 2, &ctx.cfg)?;
    let ns = ctx.spec.inner;
    Ok(vec![
        ctx.row("flow", "forward_max_diff", r.forward_max_diff, 0.0, ns, r.forward_bit_exact),
        ctx.row("flow", "backward_rms", r.backward_rms, 0.0, ns * ctx.spec.bpaths, r.backward_rms <= r.backward_tolerance),
        ctx.row("flow", "backward_tolerance", r.backward_tolerance, 0.0, 1, true),
    ])
}

fn estimates(ctx: &Ctx) -> Result<Vec<ReportRow>> {
    let lags: Vec<usize> = ESTIMATE_LAGS.iter().copied().filter(|&l| l <= ctx.spec.steps).collect();
    let x = &ctx.spec.x;
    let law = &ctx.spec.law;
    let mut rows = Vec::new();
    for p in [2.0, 4.0] {
        let pts = forward_sup_moments(&ctx.coeffs, law, x, &ctx.bundle, &lags, p)?;
        ctx.fit_rows(&fit_estimates(&format!("sup_moment_p{p}"), &pts, p / 2.0, 0.2)?, &mut rows);
    }
    let pts = time_holder_ladder(&ctx.coeffs, law, x, &ctx.bundle, 0, &lags, &ctx.cfg)?;
    ctx.fit_rows(&fit_estimates("time_holder_p2", &pts, 1.0, 0.3)?, &mut rows);
    if ctx.coeffs.noise_dim() == 1 {
        let pts = psi_eta_ladder(&ctx.coeffs, law, x, &ctx.bundle, 0, &lags, &ctx.cfg)?;
        ctx.fit_rows(&fit_estimates("psi_eta", &pts, 0.5, 0.2)?, &mut rows);
    }
    Ok(rows)
}

fn run_sweep(spec: &ScenarioSpec, plan: &SweepPlan) -> Result<Vec<ReportRow>> {
    if plan.ladder.len() < 4 {
        return Err(Error::InsufficientLadder { needed: 4, got: plan.ladder.len() });
    }
    if plan.replicates == 0 {
        return Err(Error::Config("sweep needs at least one replicate".into()));
    }
    let oracle = oracle_for(spec)
        .ok_or_else(|| Error::Config(format!("sweep needs coefficients with a closed-form oracle, got `{}`", spec.coefficients)))?;
    let specs = plan.ladder.iter().map(|&v| plan.at(spec, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for s in &specs {
        let per_rep = (0..plan.replicates)
            .map(|r| {
                let s = ScenarioSpec { seed: spec.seed + r as u64, ..s.clone() };
                let ctx = Ctx::new(&s)?;
                let cloud = ctx.forward()?;
                let sol = ctx.solve(&cloud)?;
                Ok(oracle_rmse(&oracle, &cloud, &sol)?.0.powi(2))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (ms, se) = mean_se(&per_rep);
        let value = ms.sqrt();
        let ctx = Ctx::new(s)?;
        rows.push(ctx.row("sweep", "y_rmse", value, if value > 0.0 { se / (2.0 * value) } else { 0.0 }, plan.replicates, value.is_finite()));
        points.push(crate::verify::LadderPoint {
            scale: plan.scale(s),
            value,
            se,
            dt: ctx.dt,
            n_inner: s.inner,
            n_bpaths: s.bpaths,
        });
    }
    let fit = fit_estimates("y_rmse", &points, SWEEP_TARGET, SWEEP_TOLERANCE)?;
    let ctx = Ctx::new(spec)?;
    if fit.exponent.is_finite() {
        rows.push(ctx.row("sweep", "y_rmse.exponent", fit.exponent, fit.se, points.len(), fit.pass));
    } else {
        let bad = points.iter().filter(|p| !(p.value > 0.0)).count();
        rows.push(ctx.row("sweep", "y_rmse.nonpositive_points", bad as f64, 0.0, points.len(), fit.exact_zero));
    }
    Ok(rows)
}
