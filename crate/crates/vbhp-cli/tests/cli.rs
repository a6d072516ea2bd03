//! End-to-end checks of the command-line surface: exit codes, artifact
//! formats, and determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vbhp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vbhp")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vbhp-cli-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn simulate_fit_evaluate_pipeline_exits_zero() {
    let events = tmp("pipe-events.csv");
    let model = tmp("pipe-model.json");
    let sim = run(&[
        "simulate", "--kernel", "sin", "--mu", "10", "--t-max", "3.14159265", "--seed", "7",
        "--out", events.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "simulate: {}", String::from_utf8_lossy(&sim.stderr));

    let fit = run(&[
        "fit", "--events", events.to_str().unwrap(), "--gamma", "1.0", "--alpha", "0.1",
        "--inducing", "8", "--max-iterations", "15", "--out", model.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "fit: {}", String::from_utf8_lossy(&fit.stderr));

    let eval = run(&[
        "evaluate", "--model", model.to_str().unwrap(), "--events", events.to_str().unwrap(),
        "--truth", "sin", "--mu-true", "10", "--splits", "3",
    ]);
    assert!(eval.status.success(), "evaluate: {}", String::from_utf8_lossy(&eval.stderr));
    let out = String::from_utf8_lossy(&eval.stdout);
    assert!(out.contains("l2_phi"), "{out}");
    assert!(out.contains("hll_median"), "{out}");
}

#[test]
fn predict_emits_seventeen_digit_table_and_band() {
    let events = tmp("pred-events.csv");
    let model = tmp("pred-model.json");
    run(&[
        "simulate", "--kernel", "exp", "--mu", "10", "--t-max", "3.0", "--seed", "2", "--out",
        events.to_str().unwrap(),
    ]);
    let fit = run(&[
        "fit", "--events", events.to_str().unwrap(), "--inducing", "6", "--max-iterations", "10",
        "--out", model.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let pred = run(&["predict", "--model", model.to_str().unwrap(), "--points", "10"]);
    assert!(pred.status.success());
    let out = String::from_utf8_lossy(&pred.stdout);
    let mut rows = 0;
    for line in out.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 6, "row: {line}");
        for c in &cols {
            // 17 significant digits: d.16 digits, exponent marker
            assert!(c.contains('e'), "field {c} lacks scientific notation");
            let v: f64 = c.parse().unwrap();
            assert!(v.is_finite());
        }
        let q10: f64 = cols[4].parse().unwrap();
        let q90: f64 = cols[5].parse().unwrap();
        assert!(q90 >= q10);
        rows += 1;
    }
    assert_eq!(rows, 10);
}

#[test]
fn predict_missing_model_is_a_data_error() {
    let out = run(&["predict", "--model", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_kernel_is_a_usage_error() {
    let out = run(&[
        "simulate", "--kernel", "bogus", "--mu", "1", "--t-max", "1", "--out",
        tmp("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_events_file_is_a_data_error() {
    let bad = tmp("bad-events.csv");
    std::fs::write(&bad, "0.5\nnot-a-number\n").unwrap();
    let out = run(&[
        "fit", "--events", bad.to_str().unwrap(), "--out", tmp("never.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn supercritical_simulation_is_a_numerical_error() {
    let out = run(&[
        "simulate", "--kernel", "sin", "--mu", "50", "--t-max", "60", "--seed", "1", "--out",
        tmp("boom.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn identical_runs_produce_byte_identical_artifacts() {
    let e1 = tmp("det-a.csv");
    let e2 = tmp("det-b.csv");
    let m1 = tmp("det-a.json");
    let m2 = tmp("det-b.json");
    for (e, m) in [(&e1, &m1), (&e2, &m2)] {
        run(&[
            "simulate", "--kernel", "cos", "--mu", "8", "--t-max", "3.0", "--seed", "11", "--out",
            e.to_str().unwrap(),
        ]);
        let fit = run(&[
            "fit", "--events", e.to_str().unwrap(), "--inducing", "6", "--max-iterations", "8",
            "--out", m.to_str().unwrap(),
        ]);
        assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    }
    assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
}

#[test]
fn select_writes_model_and_contour_table() {
    let events = tmp("sel-events.csv");
    let model = tmp("sel-model.json");
    let contour = tmp("sel-contour.tsv");
    run(&[
        "simulate", "--kernel", "zero", "--mu", "15", "--t-max", "2.0", "--seed", "5", "--out",
        events.to_str().unwrap(),
    ]);
    let sel = run(&[
        "select", "--events", events.to_str().unwrap(), "--gammas", "0.5,1.0", "--alphas",
        "0.1,0.3", "--inducing", "5", "--max-iterations", "5", "--out", model.to_str().unwrap(),
        "--contour", contour.to_str().unwrap(),
    ]);
    assert!(sel.status.success(), "{}", String::from_utf8_lossy(&sel.stderr));
    let table = std::fs::read_to_string(&contour).unwrap();
    assert_eq!(table.lines().count(), 5, "{table}"); // header + 4 cells
    assert!(table.starts_with("gamma\talpha\tbound"));
    assert!(model.exists());
}

#[test]
fn simulate_accepts_a_kernel_file() {
    let kf = tmp("kernel.csv");
    std::fs::write(&kf, "0.0,2.0\n0.5,1.0\n1.0,0.0\n").unwrap();
    let events = tmp("kf-events.csv");
    let out = run(&[
        "simulate", "--kernel-file", kf.to_str().unwrap(), "--mu", "5", "--t-max", "3.0",
        "--seed", "1", "--out", events.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(events.exists());
}

#[test]
fn benchmark_reports_a_slope() {
    let out = run(&["benchmark", "--sizes", "60,120", "--inducing", "4", "--iterations", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("loglog_slope"), "{text}");
}
