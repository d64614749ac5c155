use std::fs;
use std::path::Path;
use std::process::Command;

use fracture_homog::cli::run;
use fracture_homog::config::RunConfig;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn call(cmd: &str, cfg: &str, out: &Path) -> i32 {
    run(["fracture", cmd, "--config", cfg, "--out", out.to_str().unwrap(), "--serial"])
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

const ZERO_REACTIONS: &str = r#"
[physics]
amp_bulk = [0.0, 0.0]
coupling = [[0.0, 0.0], [0.0, 0.0]]
amp_source = [0.0, 0.0]
ups_a = [0.0, 0.0]
ups_b = [0.0, 0.0]
phi_p = [0.0, 0.0]
phi_r = [0.0, 0.0]
psi_s = [0.0, 0.0]
q_amp = [0.0, 0.0]
"#;

#[test]
fn cell_on_shear_flow_reports_unit_velocity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[geometry]\ncell_n1 = 16\ncell_n2 = 16\n");
    assert_eq!(call("cell", &cfg, dir.path()), 0);
    let v = column(&dir.path().join("cell_coefficients.csv"), "v_hat");
    assert_eq!(v.len(), 2);
    for s in v {
        assert!((s.parse::<f64>().unwrap() - 1.0).abs() < 1e-10, "{s}");
        // 17 significant digits
        assert_eq!(s.split('e').next().unwrap().len(), 18);
    }
}

#[test]
fn verify_on_zero_reactions_is_a_zero_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{ZERO_REACTIONS}\n[solver]\nhomog_cells = 32\n\n[verify]\nn_list = [8, 16]\nadequacy_n = [8]\n");
    let cfg = write_config(dir.path(), &body);
    assert_eq!(call("verify", &cfg, dir.path()), 0);
    let errs = dir.path().join("verify_errors.csv");
    for name in ["E_bulk_L2", "E_bulk_grad", "E_frac_L2", "E_frac_grad", "E_avg"] {
        assert!(column(&errs, name).iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
    assert_eq!(column(&errs, "adequacy_flag"), ["pass", "unchecked"]);
    assert!(column(&dir.path().join("verify_slopes.csv"), "slope").iter().all(String::is_empty));
    let summary = fs::read_to_string(dir.path().join("verify_summary.txt")).unwrap();
    assert!(summary.contains("0.35"));

    assert_eq!(call("report", &cfg, dir.path()), 0);
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[physics]\ndelay = 0.0\n");
    assert_eq!(call("cell", &cfg, dir.path()), 2);
    let cfg = write_config(dir.path(), "[physics.inflow]\nkind = \"tabulated\"\nsamples = [1.0, -1.0, 1.0]\n");
    assert_eq!(call("cell", &cfg, dir.path()), 2);
    let cfg = write_config(dir.path(), "[solver]\nunknown_key = 1\n");
    assert_eq!(call("cell", &cfg, dir.path()), 2);
    let cfg = write_config(dir.path(), "[geometry.micro]\nn_periods = 4\n");
    assert_eq!(call("cell", &cfg, dir.path()), 2);
    assert_eq!(call("cell", "/nonexistent/run.toml", dir.path()), 2);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_fracture")).args(["simulate", "--config", "x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn binary_reports_failures_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[physics]\ndelay = 0.0\n");
    let out = Command::new(env!("CARGO_BIN_EXE_fracture"))
        .args(["cell", "--config", &cfg, "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().any(|l| l.starts_with("failure,2,assumption,") && l.contains("A3")), "{err}");
}

#[test]
fn report_without_results_fails_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("empty");
    fs::create_dir(&out).unwrap();
    assert_ne!(call("report", &cfg, &out), 0);
    assert!(!out.join("summary.csv").exists());
}

#[test]
fn serial_micro_runs_are_byte_identical_and_echo_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nt_end = 0.1\n\n[output]\nsnapshot_stride = 5\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(call("micro", &cfg, &a), 0);
    assert_eq!(call("micro", &cfg, &b), 0);
    for f in ["micro_snapshots.csv", "micro_balance.csv", "micro_summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echo = fs::read_to_string(a.join("effective_config.toml")).unwrap();
    let orig = RunConfig::from_toml_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(RunConfig::from_toml_str(&echo).unwrap(), orig);
}
