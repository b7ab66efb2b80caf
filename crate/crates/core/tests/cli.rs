use mfbdsde::cli::{read_report, REPORT_HEADER};
use mfbdsde::coefficients::builtin_scenarios;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_mfbdsde");
const SMALL: [&str; 6] = ["--dt", "0.125", "--particles", "256", "--bpaths", "4"];

fn scenario(dir: &Path, id: &str) -> PathBuf {
    let (spec, _) = builtin_scenarios().into_iter().find(|(s, _)| s.id == id).unwrap();
    let path = dir.join(format!("{id}.cfg"));
    std::fs::write(&path, spec.to_document()).unwrap();
    path
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S], env_seed: Option<&str>) -> (i32, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("MFBDSDE_SEED");
    if let Some(s) = env_seed {
        cmd.env("MFBDSDE_SEED", s);
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn forward_run_writes_named_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "S4");
    let out = dir.path().join("out");
    let mut args = vec!["simulate-forward", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"];
    args.extend(SMALL);
    let (code, err) = run(&args, None);
    assert_eq!(code, 0, "{err}");
    assert_eq!(files(&out), ["S4__simulate-forward__5.csv", "S4__simulate-forward__5.manifest.json"]);
    let text = std::fs::read_to_string(out.join("S4__simulate-forward__5.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER.join(","));
    let rows = read_report(&out.join("S4__simulate-forward__5.csv")).unwrap();
    assert!(rows.iter().all(|r| r.seed == 5 && r.n == 256 && r.m == 4 && r.dt == 0.125));
}

#[test]
fn seed_flag_beats_environment_which_beats_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "S1");
    let out = dir.path().join("out");
    let base = ["simulate-forward", sc.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let with = |extra: &[&'static str]| -> Vec<String> { base.iter().chain(SMALL.iter()).chain(extra.iter()).map(|s| s.to_string()).collect() };
    assert_eq!(run(&with(&[]), Some("77")).0, 0);
    assert_eq!(run(&with(&["--seed", "78"]), Some("77")).0, 0);
    assert_eq!(run(&with(&[]), None).0, 0);
    let names = files(&out);
    for seed in ["1", "77", "78"] {
        assert!(names.contains(&format!("S1__simulate-forward__{seed}.csv")), "{names:?}");
    }
}

#[test]
fn missing_horizon_exits_two_without_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "S1");
    let text = std::fs::read_to_string(&sc).unwrap();
    let broken: String = text.lines().filter(|l| !l.starts_with("time.T")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&sc, broken).unwrap();
    let out = dir.path().join("out");
    let (code, err) = run(&["solve-bdsde", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("time.T"), "{err}");
    assert!(!out.exists() || files(&out).is_empty());
}

#[test]
fn usage_and_configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "S2");
    let out = dir.path().join("out");
    let s = sc.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(run(&["no-such-command"], None).0, 2);
    assert_eq!(run(&["solve-bdsde", "--scenario", "/nonexistent.cfg"], None).0, 2);
    assert_eq!(run(&["solve-bdsde", s, "--out", o, "--dt", "0.3"], None).0, 2);
    let (code, err) = run(&["sweep", s, "--out", o, "--axis", "N", "--ladder", "256"], None);
    assert_eq!(code, 2, "{err}");
    assert!(err.to_lowercase().contains("ladder"), "{err}");
    assert_eq!(run(&["sweep", s, "--out", o, "--axis", "q", "--ladder", "1,2,3,4"], None).0, 2);
    assert!(!out.exists() || files(&out).is_empty());
}

#[test]
fn replay_reproduces_the_report_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "S4");
    let out = dir.path().join("out");
    let mut args = vec!["solve-bdsde", sc.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(run(&args, Some("3")).0, 0);
    let manifest = out.join("S4__solve-bdsde__3.manifest.json");
    let again = dir.path().join("again");
    let (code, err) = run(&["replay", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()], None);
    assert_eq!(code, 0, "{err}");
    let a = std::fs::read(out.join("S4__solve-bdsde__3.csv")).unwrap();
    let b = std::fs::read(again.join("S4__solve-bdsde__3.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn merge_adds_provenance_and_rejects_foreign_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for id in ["S1", "S0"] {
        let sc = scenario(dir.path(), id);
        let mut args = vec!["simulate-forward", sc.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend(SMALL);
        assert_eq!(run(&args, None).0, 0);
    }
    let a = out.join("S1__simulate-forward__1.csv");
    let b = out.join("S0__simulate-forward__1.csv");
    let merged = dir.path().join("merged.csv");
    assert_eq!(run(&["merge", a.to_str().unwrap(), b.to_str().unwrap(), "--out", merged.to_str().unwrap()], None).0, 0);
    let text = std::fs::read_to_string(&merged).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].ends_with(",provenance"));
    assert!(lines[1].starts_with("S0,") && lines[1].ends_with(",S0__simulate-forward__1.csv"));
    assert!(lines.last().unwrap().starts_with("S1,"));
    let foreign = dir.path().join("foreign.csv");
    std::fs::write(&foreign, "a,b\n1,2\n").unwrap();
    let (code, err) = run(&["merge", a.to_str().unwrap(), foreign.to_str().unwrap(), "--out", merged.to_str().unwrap()], None);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn every_subcommand_runs_on_the_catalog_at_small_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let sc = scenario(dir.path(), "S1");
    let o = out.to_str().unwrap();
    for cmd in ["simulate-forward", "solve-bdsde", "check-ito", "check-representation", "check-flow"] {
        let mut args = vec![cmd, sc.to_str().unwrap(), "--out", o];
        args.extend(["--dt", "0.0625", "--particles", "512", "--bpaths", "8"]);
        let (code, err) = run(&args, None);
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    for id in ["S0", "S2", "S3", "S5"] {
        let sc = scenario(dir.path(), id);
        let mut args = vec!["solve-bdsde", sc.to_str().unwrap(), "--out", o];
        args.extend(SMALL);
        let (code, err) = run(&args, None);
        assert!(code == 0 || code == 1, "{id}: {code} {err}");
    }
}
