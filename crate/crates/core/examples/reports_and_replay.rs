//! Running a check as the command line does: report rows, the CSV file, the
//! run manifest and a bit-exact replay.

use mfbdsde::cli::{execute, render_report, replay_manifest, Overrides, Subcommand};
use mfbdsde::coefficients::builtin_scenarios;

fn main() -> mfbdsde::error::Result<()> {
    let dir = std::env::temp_dir().join("mfbdsde-example");
    std::fs::create_dir_all(&dir)?;
    let (spec, _) = builtin_scenarios().swap_remove(1);
    let scenario = dir.join("S1.cfg");
    std::fs::write(&scenario, spec.to_document())?;

    let overrides = Overrides { seed: Some(9), dt: Some(0.0625), particles: Some(1024), bpaths: Some(8), tol: None };
    let out = execute(Subcommand::SolveBdsde, &scenario, &overrides, None, &dir, None)?;
    print!("{}", render_report(&out.rows)?);
    println!("report {}\nmanifest {}", out.report_path.display(), out.manifest_path.display());

    let (_, identical) = replay_manifest(&out.manifest_path, Some(&dir.join("replay")))?;
    println!("replay bit-exact: {identical}");
    Ok(())
}
