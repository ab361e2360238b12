//! Runs the built binary against small configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
case = "DD"
d = 1.0
P = 1.0
eps = 1e-3
seed = 3

[profile]
L = 1.0
lambda = 0.5
beta = 8.0

[grid]
N = 50

[horizon]
T = 3.0
stride = 5
slack = 0.3

[disturbance]
kind = "raised_cosine"
amplitude = 1.0
omega = 6.283185307179586
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_backstep"))
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{BASE}{extra}")).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path, overrides: &[&str]) -> Output {
    bin().args(args).arg("-c").arg(cfg).arg("-o").arg(out).args(overrides).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn kernel_tables_and_refinement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("k");
    let o = run(&["kernel"], &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("refinement.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["32", "64", "128"]);
    let rk: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for w in rk.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }
    for f in ["kernel.csv", "traces.csv", "scalars.csv"] {
        assert!(out.join(f).exists());
    }
}

#[test]
fn identity_profile_gives_zero_kernel_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("k");
    let o = run(&["kernel"], &cfg, &out, &["profile.lambda=-1.0", "profile.beta=-1.0", "kernel.ladder=[8]"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("kernel.csv")).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!((f[2], f[3]), (0.0, 0.0), "{line}");
    }
}

#[test]
fn missing_key_is_a_config_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "case = \"DD\"\nd = 1.0\n[grid]\nN = 20\n").unwrap();
    let o = run(&["kernel"], &cfg, &dir.path().join("k"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`profile`"));
}

#[test]
fn simulate_reports_slope_in_both_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    for (case, extra) in [("DD", vec![]), ("DN", vec!["profile.alpha=0.3"])] {
        let out = dir.path().join(case);
        let mut ov = vec![format!("case={case}")];
        ov.extend(extra.iter().map(|s| s.to_string()));
        let ov: Vec<&str> = ov.iter().map(|s| s.as_str()).collect();
        let o = run(&["simulate"], &cfg, &out, &ov);
        assert_eq!(code(&o), 0, "{case}: {}", String::from_utf8_lossy(&o.stderr));
        let r = json(&out.join("energy_report.json"));
        assert!(r["energy"]["slope"].as_f64().unwrap() < -1.7, "{case}: {r}");
        assert_eq!(r["passed"], true);
        let header = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
        assert!(header.starts_with("t,E,V,"));
    }
}

#[test]
fn zero_initial_state_has_undefined_slope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("z");
    let o = run(&["simulate"], &cfg, &out, &["init.shape=zero", "disturbance.kind=zero"]);
    assert_eq!(code(&o), 0);
    let r = json(&out.join("energy_report.json"));
    assert!(r["energy"].is_null());
    assert!(r["note"].as_str().unwrap().contains("undefined"));
}

#[test]
fn failed_slope_check_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    // no controller margin against the disturbance and a demanding bound
    let o = run(&["simulate"], &cfg, &dir.path().join("s"), &["P=0.0", "horizon.slack=-0.5"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn outputs_are_deterministic_and_never_silently_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["simulate"], &cfg, &a, &[])), 0);
    assert_eq!(code(&run(&["simulate"], &cfg, &b, &[])), 0);
    for f in ["trajectory.csv", "energy_report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let again = run(&["simulate"], &cfg, &a, &[]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&run(&["simulate", "--force"], &cfg, &a, &[])), 0);
}

#[test]
fn resolvent_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let zero = dir.path().join("zero");
    assert_eq!(code(&run(&["resolvent"], &cfg, &zero, &["resolvent.data=zero"])), 0);
    let v = json(&zero.join("resolvent_verdict.json"));
    assert_eq!(v["ok"], true);
    assert_eq!(v["b"], 0.0);
    let cn = dir.path().join("cn");
    assert_eq!(code(&run(&["resolvent"], &cfg, &cn, &["resolvent.data=constant_n", "case=DN"])), 0);
    let v = json(&cn.join("resolvent_verdict.json"));
    assert_eq!(v["inclusion_ok"], true);
    assert!(v["b"].as_f64().unwrap().abs() <= 1.0);
    let csv = std::fs::read_to_string(cn.join("resolvent_sweep.csv")).unwrap();
    assert!(csv.starts_with("sigma,qL,qpL,b,bc_residual,norm_H2\n"));
    assert_eq!(csv.lines().count(), 7);
    let bad = run(&["resolvent"], &cfg, &dir.path().join("bad"), &["resolvent.sigmas=[0.1, -1.0]"]);
    assert_eq!(code(&bad), 2);
    let bad = run(&["resolvent"], &cfg, &dir.path().join("bad"), &["resolvent.sigmas=oops"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn verify_selection_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = bin().args(["verify", "--only", "2,4", "--json", "-o"]).arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ids: Vec<u64> = printed.as_array().unwrap().iter().map(|v| v["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [2, 4]);
    assert_eq!(json(&out.join("verify.json")), printed);
    let unknown = bin().args(["verify", "--only", "12"]).output().unwrap();
    assert_eq!(code(&unknown), 2);
}

#[test]
fn verify_exits_4_on_a_failing_criterion() {
    // criterion 7 misses its error budget by a constant factor
    let o = bin().args(["verify", "--only", "7"]).output().unwrap();
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("[FAIL] 7"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\n[sweep]\nkey = \"P\"\nvalues = [1.0, 2.0, 3.0]\n");
    let out = dir.path().join("w");
    let o = bin().args(["sweep", "--jobs", "2", "-c"]).arg(&cfg).arg("-o").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "P,slope,C_empirical,passed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
    let missing = run(&["sweep"], &config(dir.path(), ""), &dir.path().join("m"), &[]);
    assert_eq!(code(&missing), 2);
}
