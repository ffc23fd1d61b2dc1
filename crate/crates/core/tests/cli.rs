use std::fs;
use std::process::{Command, Output};

fn featspeed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featspeed")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn schemes_prints_six_values() {
    let o = featspeed(&["schemes", "fsc_resnet", "--d", "10", "--m", "256", "--k", "1", "--L", "16", "--beta", "0.25", "--setting", "dense"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let values: Vec<(&str, f64)> = text
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert_eq!(values.len(), 6);
    // eta_hid = 1 / (beta^2 L) = 1 at beta = 1/sqrt(L).
    let eta_hid = values.iter().find(|(k, _)| *k == "eta_hid").unwrap().1;
    assert!((eta_hid - 1.0).abs() < 1e-6);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(featspeed(&[]).status.code(), Some(1));
    assert_eq!(featspeed(&["run", "no_such_experiment"]).status.code(), Some(1));
    assert_eq!(featspeed(&["schemes", "ntk", "--m", "zero"]).status.code(), Some(1));
    assert_eq!(featspeed(&["run", "fig1a", "--seeds", "0"]).status.code(), Some(1));
    assert_eq!(featspeed(&["plot", "/definitely/missing.csv"]).status.code(), Some(1));
    assert_eq!(featspeed(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"experiment": "invariance_suite", "seeds": 7, "m": 16, "L": 4, "steps": 3, "out": "ignored"}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = featspeed(&["run", "invariance_suite", "--config", cfg.to_str().unwrap(), "--seeds", "2", "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("invariance_suite_deviations.csv")).unwrap();
    let (meta, table) = featspeed::table::Table::parse(&text).unwrap();
    assert!(meta.iter().any(|(k, _)| k == "config_hash"));
    let seeds = table.column("seed").unwrap();
    let m = table.column("m").unwrap();
    assert!(table.rows.iter().all(|r| r[seeds] == "0" || r[seeds] == "1"));
    assert!(table.rows.iter().all(|r| r[m] == "16"));

    // A config written for another experiment is a usage error.
    let o = featspeed(&["run", "fig1a", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_assertions_exit_two() {
    // A cubic growth target the linear MLP cannot meet.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"experiment": "fig1b", "m": 8, "seeds": 1, "series": [{"label": "flat", "arch": "mlp", "activation": "linear",
            "init": "standard", "lrs": "quadratic", "checks": [{"along": "L", "exponent": 3.0, "tol": 0.01}]}]}"#,
    )
    .unwrap();
    let o = featspeed(&["run", "fig1b", "--config", cfg.to_str().unwrap(), "--grid-L", "4,8,16", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("[FAIL]"));
}

#[test]
fn plot_reads_axes_from_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = featspeed(&["run", "zero_init", "--grid-L", "4,8", "--seeds", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("zero_init_ratios.csv");
    let o = featspeed(&["plot", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(dir.path().join("zero_init_ratios.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));

    let o = featspeed(&["plot", csv.to_str().unwrap(), "--x", "L", "--y", "no_such_column"]);
    assert_eq!(o.status.code(), Some(1));
}
