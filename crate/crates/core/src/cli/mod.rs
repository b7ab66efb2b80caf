//! Command-line front end: scenario loading, overrides, report and manifest
//! emission, manifest replay and report merging.

mod report;
mod tasks;

pub use report::{
    format_float, parse_report, read_report, render_report, report_file_name, report_merge, write_report, ReportRow, PROVENANCE,
    REPORT_HEADER,
};
pub use tasks::{
    oracle_for, oracle_rmse, run_task, steps_for_dt, Subcommand, SweepAxis, SweepPlan, ESTIMATE_LAGS, ITO_FUNCTIONAL,
    SPDE_QUADRATURE, SPDE_RELATIVE_TOL, SPDE_WINDOW, SWEEP_TARGET, SWEEP_TOLERANCE,
};

use crate::coefficients::ScenarioSpec;
use crate::error::{Error, Result};
use clap::{Args, Parser};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Environment variable overriding the scenario seed (the `--seed` flag wins).
pub const SEED_ENV: &str = "MFBDSDE_SEED";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Exit code of an error: configuration and input problems give 2, numerical
/// failures give 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::InsufficientLadder { .. }
        | Error::SchemaMismatch(_)
        | Error::NonpositiveHorizon { .. }
        | Error::ZeroSteps
        | Error::Unsupported(_)
        | Error::MissingDerivative(_)
        | Error::ThetaOffGrid { .. } => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

/// Resolution and seed overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct Overrides {
    /// Seed; wins over MFBDSDE_SEED and the scenario file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Time step; must divide the horizon.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Inner particles N per backward path.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Backward paths M.
    #[arg(long)]
    pub bpaths: Option<usize>,
    /// Picard tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

impl Overrides {
    /// Applies the overrides; the seed resolves as flag, then `env_seed`, then file.
    pub fn apply(&self, spec: &ScenarioSpec, env_seed: Option<&str>) -> Result<ScenarioSpec> {
        let mut s = spec.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        } else if let Some(v) = env_seed {
            s.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} must be a u64, got `{v}`")))?;
        }
        if let Some(dt) = self.dt {
            s.steps = steps_for_dt(spec, dt)?;
        }
        if let Some(n) = self.particles {
            s.inner = n;
        }
        if let Some(m) = self.bpaths {
            s.bpaths = m;
        }
        if let Some(t) = self.tol {
            s.picard_tol = t;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (dotted-key TOML).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Scenario file, as a positional alternative to --scenario.
    #[arg(value_name = "SCENARIO")]
    pub scenario_pos: Option<PathBuf>,
    /// Output directory for the report and manifest.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Axis to refine: dt, N or M.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated ladder values (at least four).
    #[arg(long, value_delimiter = ',')]
    pub ladder: Vec<f64>,
    /// Independent seeds per ladder point.
    #[arg(long, default_value_t = 8)]
    pub replicates: usize,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "mfbdsde", version, about = "Mean-field BDSDE solvers and numerical checks")]
pub enum Cli {
    /// Forward law and pilot paths, with the restart property.
    SimulateForward(RunArgs),
    /// Backward solve, with the closed-form oracle where one exists.
    SolveBdsde(RunArgs),
    /// Both sides of the mean-field Itô formula for a quadratic functional.
    CheckIto(RunArgs),
    /// Backward SPDE residual of the value function on a short window.
    CheckSpde(RunArgs),
    /// Representation of Z through the spatial derivative of the value function.
    CheckRepresentation(RunArgs),
    /// Forward and backward restart properties.
    CheckFlow(RunArgs),
    /// Log-log fits of the moment, time-regularity and Ψ_η estimates.
    FitEstimates(RunArgs),
    /// Oracle error over a dt, N or M ladder with a fitted exponent.
    Sweep(SweepArgs),
    /// Reruns a manifest and compares against its recorded report.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merges report files into one with a provenance column.
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything needed to rerun one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_path: String,
    /// Scenario after overrides, as run.
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub subcommand: Subcommand,
    pub sweep: Option<SweepPlan>,
    pub artifact_version: String,
    /// Wall-clock start and end, seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    /// Report file name, next to the manifest.
    pub report: String,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad manifest: {e}")))
    }

    /// Recomputes the report rows.
    pub fn replay(&self) -> Result<Vec<ReportRow>> {
        if self.seed != self.scenario.seed {
            return Err(Error::Config("manifest seed disagrees with its scenario".into()));
        }
        run_task(self.subcommand, &self.scenario, self.sweep.as_ref())
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Manifest file name for a report file name.
pub fn manifest_file_name(report: &str) -> String {
    format!("{}.manifest.json", report.trim_end_matches(".csv"))
}

/// Result of one invocation that produced a report.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub rows: Vec<ReportRow>,
    pub report_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

impl Outcome {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ScenarioSpec::parse(&text)
}

/// Loads, overrides, runs and writes the report and manifest. Nothing is
/// written when any step fails.
pub fn execute(
    cmd: Subcommand,
    scenario_path: &Path,
    overrides: &Overrides,
    sweep: Option<SweepPlan>,
    out: &Path,
    env_seed: Option<&str>,
) -> Result<Outcome> {
    let started = now();
    let spec = overrides.apply(&load_scenario(scenario_path)?, env_seed)?;
    let rows = run_task(cmd, &spec, sweep.as_ref())?;
    if let Some(r) = rows.iter().find(|r| !r.is_finite()) {
        eprintln!("non-finite metric {}/{}", r.check, r.metric);
        return Err(Error::NonfiniteState { node: 0 });
    }
    let report = report_file_name(&spec.id, cmd.name(), spec.seed);
    std::fs::create_dir_all(out)?;
    let report_path = out.join(&report);
    write_report(&report_path, &rows)?;
    let manifest = RunManifest {
        scenario_path: scenario_path.display().to_string(),
        seed: spec.seed,
        scenario: spec,
        subcommand: cmd,
        sweep,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: now(),
        report: report.clone(),
    };
    let manifest_path = out.join(manifest_file_name(&report));
    std::fs::write(&manifest_path, manifest.to_json()?)?;
    Ok(Outcome { rows, report_path, manifest_path, manifest })
}

/// Replays a manifest, writes the fresh report to `out` (default: a `replay`
/// directory beside the manifest) and reports whether it matches the recorded
/// report bit for bit.
pub fn replay_manifest(path: &Path, out: Option<&Path>) -> Result<(Vec<ReportRow>, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let m = RunManifest::from_json(&text)?;
    let rows = m.replay()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let recorded = std::fs::read_to_string(dir.join(&m.report)).ok();
    let fresh = render_report(&rows)?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("replay"));
    std::fs::create_dir_all(&target)?;
    std::fs::write(target.join(&m.report), &fresh)?;
    Ok((rows, recorded.as_deref() == Some(fresh.as_str())))
}

fn scenario_arg(a: &RunArgs) -> Result<&Path> {
    a.scenario
        .as_deref()
        .or(a.scenario_pos.as_deref())
        .ok_or_else(|| Error::Config("a scenario file is required (--scenario <path>)".into()))
}

fn summarize(o: &Outcome) -> i32 {
    let failed: Vec<&ReportRow> = o.rows.iter().filter(|r| !r.pass).collect();
    for r in &failed {
        eprintln!("FAIL {}/{}/{} = {}", r.scenario, r.check, r.metric, format_float(r.value));
    }
    println!("{}", o.report_path.display());
    if failed.is_empty() {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = match cli {
        Cli::Replay { manifest, out } => replay_manifest(&manifest, out.as_deref()).map(|(rows, same)| {
            if !same {
                eprintln!("replay differs from the recorded report");
                EXIT_FAIL
            } else if rows.iter().all(|r| r.pass) {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }),
        Cli::Merge { inputs, out } => report_merge(&inputs).and_then(|text| Ok(std::fs::write(&out, text)?)).map(|_| EXIT_PASS),
        Cli::Sweep(s) => (|| {
            let plan = SweepPlan { axis: s.axis.parse()?, ladder: s.ladder.clone(), replicates: s.replicates };
            if plan.ladder.len() < 4 {
                return Err(Error::InsufficientLadder { needed: 4, got: plan.ladder.len() });
            }
            let o = execute(Subcommand::Sweep, scenario_arg(&s.run)?, &s.run.overrides, Some(plan), &s.run.out, env_seed.as_deref())?;
            Ok(summarize(&o))
        })(),
        other => {
            let (cmd, a) = match other {
                Cli::SimulateForward(a) => (Subcommand::SimulateForward, a),
                Cli::SolveBdsde(a) => (Subcommand::SolveBdsde, a),
                Cli::CheckIto(a) => (Subcommand::CheckIto, a),
                Cli::CheckSpde(a) => (Subcommand::CheckSpde, a),
                Cli::CheckRepresentation(a) => (Subcommand::CheckRepresentation, a),
                Cli::CheckFlow(a) => (Subcommand::CheckFlow, a),
                Cli::FitEstimates(a) => (Subcommand::FitEstimates, a),
                _ => unreachable!("handled above"),
            };
            scenario_arg(&a)
                .and_then(|p| execute(cmd, p, &a.overrides, None, &a.out, env_seed.as_deref()))
                .map(|o| summarize(&o))
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_flag_wins_over_environment() {
        let s = ScenarioSpec::default();
        let o = Overrides { seed: Some(5), ..Default::default() };
        assert_eq!(o.apply(&s, Some("9")).unwrap().seed, 5);
        assert_eq!(Overrides::default().apply(&s, Some("9")).unwrap().seed, 9);
        assert_eq!(Overrides::default().apply(&s, None).unwrap().seed, s.seed);
        assert!(Overrides::default().apply(&s, Some("x")).is_err());
    }

    #[test]
    fn dt_override_sets_the_step_count() {
        let s = ScenarioSpec::default();
        let o = Overrides { dt: Some(0.125), ..Default::default() };
        assert_eq!(o.apply(&s, None).unwrap().steps, 8);
        assert!(Overrides { dt: Some(0.3), ..Default::default() }.apply(&s, None).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::InsufficientLadder { needed: 4, got: 1 }), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::PicardDivergence { iterations: 3 }), EXIT_SOLVER);
        assert_eq!(exit_code(&Error::RegressionSingular("x".into())), EXIT_SOLVER);
    }

    #[test]
    fn subcommand_names_round_trip() {
        for c in Subcommand::ALL {
            assert_eq!(c.name().parse::<Subcommand>().unwrap(), c);
        }
    }
}
