use std::process::{Command, Output};

fn dcmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmpc")).args(args).env_remove("RUST_LOG").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_passes_on_the_shipped_network() {
    let o = dcmpc(&["validate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("h_max"));
    assert!(text.trim_end().ends_with("result: pass"));
}

#[test]
fn validate_rejects_a_too_large_step() {
    let o = dcmpc(&["validate", "--step", "0.05"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_VALIDATION]: "), "{}", stderr(&o));
}

#[test]
fn invalid_gains_are_reported_per_bus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/cigre11.toml"))
        .unwrap()
        .replace("k1 = -3.0", "k1 = 1.5");
    std::fs::write(&path, text).unwrap();
    let o = dcmpc(&["--network", path.to_str().unwrap(), "validate"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error[E_VALIDATION]: "), "{err}");
    assert!(err.contains("bus 1 violates k1 < 1"), "{err}");
}

#[test]
fn setpoints_print_one_row_per_bus() {
    let o = dcmpc(&["setpoints", "--load-scale", "1.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 11);
    assert!(text.contains("losses_W"));
}

#[test]
fn wrong_load_count_is_a_dimension_error() {
    let o = dcmpc(&["setpoints", "--loads", "0.1,0.2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_DIMENSION]: "), "{}", stderr(&o));
}

#[test]
fn missing_scenario_file_is_a_config_error() {
    let o = dcmpc(&["run", "--scenario", "/nonexistent/scenario.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_CONFIG]: "), "{}", stderr(&o));
}

#[test]
fn malformed_network_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "format = 1\nname = ").unwrap();
    let o = dcmpc(&["--network", path.to_str().unwrap(), "validate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[E_PARSE]: "), "{}", stderr(&o));
}

#[test]
fn short_comparison_writes_csvs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dcmpc(&[
        "run",
        "--scenario",
        "line_failure",
        "--compare",
        "--duration",
        "0.3",
        "--horizon",
        "20",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert_eq!(summary, stdout(&o));
    let row = summary.lines().rev().find(|l| l.starts_with("line_failure")).unwrap();
    assert!(row.trim_end().ends_with('%'), "{row}");
    for controller in ["tracking", "economic"] {
        let csv = std::fs::read_to_string(dir.path().join(format!("line_failure_{controller}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# dcmpc-trajectory/1"));
        assert_eq!(lines.next().unwrap().split(',').count(), 1 + 11 + 11 + 2);
        assert_eq!(lines.count(), 30);
    }
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dcmpc"))
        .args(["run", "--duration", "0.05", "--horizon", "10"])
        .env("DCMPC_OUT", dir.path())
        .env("DCMPC_CONTROLLER", "tracking")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("nominal_tracking.csv").exists());
}
