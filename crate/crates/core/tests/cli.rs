//! End-to-end runs of the `wentzell-wave` binary on the shipped configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_wentzell-wave");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> (i32, String) {
    let o = Command::new(BIN).args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

const LINEAR: &str = r#"
[geometry]
kind = "interval"
n_x = 16

[metric]
family = "pulsating"
eps = 0.2
omega = 2.0
horizon = 0.5

[masses]
m = -1.0
m_b = -1.0

[source]
bulk = "sin(t)"

[initial]
u = "cos(pi*x)"
random = "smooth"
scale = 0.1

[solver]
dt = 0.01
snapshots = [0.25]
"#;

#[test]
fn shipped_verify_configs_pass_every_check() {
    for name in ["verify-interval.toml", "verify-cylinder.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let (code, log) = run(&["verify"], &configs().join(name), dir.path());
        assert_eq!(code, 0, "{name}: {log}");
        let checks = fs::read_to_string(dir.path().join("checks.csv")).unwrap();
        assert!(checks.starts_with("check,pass,value,tolerance"));
        assert!(checks.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{checks}");
        assert!(log.contains("checks passed"));
    }
}

#[test]
fn focusing_constant_data_report_blow_up() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(&["nonlinear"], &configs().join("blowup.toml"), dir.path());
    assert_eq!(code, 4, "{log}");
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let line = report.lines().find(|l| l.starts_with("blow-up: t+ estimate")).expect("t+ line");
    let t_plus: f64 = line.split_whitespace().nth(3).unwrap().trim_end_matches(',').parse().unwrap();
    assert!((t_plus - 1.854_074_677).abs() < 0.05 * 1.854_074_677, "{t_plus}");
    for f in ["certificate.txt", "picard.csv", "trajectory.csv", "windows.csv", "manifest.toml", "config.toml"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let windows = fs::read_to_string(dir.path().join("windows.csv")).unwrap();
    assert!(windows.lines().count() > 10, "shrink history too short");
}

#[test]
fn linear_runs_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), LINEAR);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, log) = run(&["linear-nonauto", "--seed", "7"], &cfg, out);
        assert_eq!(code, 0, "{log}");
    }
    for f in ["trajectory.csv", "kato.csv", "snapshot_000025.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    let parsed: toml::Table = manifest.parse().unwrap();
    assert_eq!(parsed["run"]["seed"].as_integer(), Some(7));
    assert_eq!(parsed["run"]["mode"].as_str(), Some("linear-nonauto"));
    let header = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert!(header.lines().next().unwrap().starts_with("t,"));
}

#[test]
fn autonomous_mode_freezes_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &LINEAR.replace("bulk = \"sin(t)\"", "bulk = 0.0"));
    let (code, log) = run(&["linear-auto"], &cfg, dir.path());
    assert_eq!(code, 0, "{log}");
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let energies: Vec<f64> = report
        .lines()
        .find(|l| l.starts_with("energy"))
        .unwrap()
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    assert!(((energies[1] - energies[0]) / energies[0]).abs() < 1e-11, "{energies:?}");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();

    let bad = write_config(dir.path(), "[geometry]\nkind = \"interval\"\nn_x = 8\nbogus = 1\n\n[metric]\nhorizon = 1.0\n");
    let (code, log) = run(&["linear-auto"], &bad, &dir.path().join("o1"));
    assert_eq!(code, 1, "{log}");
    assert!(log.contains("line"), "{log}");

    let positive_mass = write_config(dir.path(), &LINEAR.replace("m = -1.0", "m = 1.0"));
    let (code, log) = run(&["linear-auto"], &positive_mass, &dir.path().join("o2"));
    assert_eq!(code, 2, "{log}");
    let (code, log) = run(&["linear-auto", "--allow-unchecked"], &positive_mass, &dir.path().join("o3"));
    assert_eq!(code, 0, "{log}");
    assert!(log.contains("warning"));

    let supercritical = write_config(
        dir.path(),
        &format!("{LINEAR}\n[nonlinearity]\nalpha = 4.0\nbeta = 2.0\np = -1.0\np_b = -1.0\ndimension = 3\n"),
    );
    let (code, log) = run(&["nonlinear"], &supercritical, &dir.path().join("o4"));
    assert_eq!(code, 2, "{log}");

    let no_sweep = write_config(dir.path(), LINEAR);
    let (code, _) = run(&["sweep"], &no_sweep, &dir.path().join("o5"));
    assert_eq!(code, 1);

    let o = Command::new(BIN).arg("sideways").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_point_per_value_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = run(&["sweep", "--jobs", "2"], &configs().join("sweep-eps.toml"), dir.path());
    assert_eq!(code, 0, "{log}");
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let m0_col = headers.iter().position(|h| h == "m0").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let m0: Vec<f64> = rows.iter().map(|r| r[m0_col].parse().unwrap()).collect();
    assert!((m0[0] - 1.0).abs() < 1e-9, "flat metric should give M0 = 1, got {}", m0[0]);
    for i in 0..4 {
        assert!(dir.path().join(format!("point_{i:03}/trajectory.csv")).exists());
    }
    assert!(log.contains("M0 along metric.eps"));
}
