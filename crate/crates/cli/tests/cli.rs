//! Command-level behavior: exit codes, file outputs, output formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pevgrid")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn pevgrid")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("pevgrid_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small 24-slot scenario (short stays keep prediction windows short).
fn demo_scenario(dir: &Path) -> PathBuf {
    let out = run(&[
        "gen-scenario",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--count-per-station",
        "2",
        "--capacity-kwh",
        "16",
        "--stay-slots",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("scenario.scn")
}

fn count_data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().map(|s| s.parse::<usize>().is_ok()).unwrap_or(false))
        .count()
}

#[test]
fn online_on_generated_scenario_writes_full_trace() {
    let dir = fresh_dir("online_ok");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "simulate-online",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--plots",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count_data_rows(&out_dir.join("online_trace.csv")), 24);
    for file in ["summary.csv", "voltages.csv", "generation.csv", "run_meta.csv", "power.svg", "voltage.svg", "charging_load.svg"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let svg = std::fs::read_to_string(out_dir.join("voltage.svg")).unwrap();
    assert!(svg.contains("<polyline"));
}

#[test]
fn missing_scenario_file_exits_one_and_names_path() {
    let out = run(&[
        "simulate-online",
        "--scenario",
        "/nonexistent/path/to.scn",
        "--out",
        "/tmp/unused_out",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/path/to.scn"), "stderr: {err}");
}

#[test]
fn starved_solver_exits_two_with_partial_trace() {
    let dir = fresh_dir("online_maxiter");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "simulate-online",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--max-iter",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // Partial trace written: the file exists with the schema header.
    let trace = std::fs::read_to_string(out_dir.join("online_trace.csv")).unwrap();
    assert!(trace.starts_with("slot,gen_cost,charge_cost"));
}

#[test]
fn offline_summary_reports_bound_below_value() {
    let dir = fresh_dir("offline_joint");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "simulate-offline",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("offline_summary.csv")).unwrap();
    let value_of = |key: &str| -> f64 {
        summary
            .lines()
            .find(|l| l.starts_with(&format!("{key},")))
            .and_then(|l| l.split(',').nth(1))
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("{key} missing in summary"))
    };
    let bound = value_of("lower_bound");
    let value = value_of("objective");
    assert!(value >= bound - 1e-6 * (1.0 + value.abs()), "value {value} below bound {bound}");
    // Trace ends with the lower-bound row.
    let trace = std::fs::read_to_string(out_dir.join("offline_trace.csv")).unwrap();
    assert!(trace.trim_end().lines().last().unwrap().starts_with("lower_bound,"));
}

#[test]
fn offline_dnoa_populates_iteration_column() {
    let dir = fresh_dir("offline_dnoa");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "simulate-offline",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "dnoa",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = {
        let text = std::fs::read_to_string(out_dir.join("offline_trace.csv")).unwrap();
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        (header, rows)
    };
    let col = header.iter().position(|h| h == "noa_iters").expect("noa_iters column");
    let populated = rows
        .iter()
        .filter(|r| r.first().map(|s| s.parse::<usize>().is_ok()).unwrap_or(false))
        .all(|r| r[col].parse::<usize>().is_ok());
    assert!(populated, "per-slot iteration counts must parse");
}

#[test]
fn invalid_method_exits_one() {
    let out = run(&[
        "simulate-offline",
        "--scenario",
        "whatever.scn",
        "--out",
        "/tmp/unused",
        "--method",
        "fancy",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_prints_unit_ratio_for_identical_totals() {
    let dir = fresh_dir("compare_fresh");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // This scenario's relaxation is tight, so online matches offline.
    assert!(stdout.contains("ratio 1.000000"), "stdout: {stdout}");
    assert!(out_dir.join("compare.csv").exists());
    assert!(out_dir.join("compare_summary.csv").exists());
}

#[test]
fn compare_from_traces_requires_offline_trace() {
    let dir = fresh_dir("compare_missing");
    let scenario = demo_scenario(&dir);
    let out_dir = dir.join("run");
    // Produce only the online side.
    let out = run(&[
        "simulate-online",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--from-traces",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("offline_trace.csv"), "stderr: {err}");
}

#[test]
fn solve_opf_reports_rank_one_without_repair() {
    let dir = fresh_dir("solve_opf");
    let case = dir.join("case2.case");
    std::fs::write(&case, pevgrid::bundled::CASE2).unwrap();
    let out = run(&["solve-opf", "--case", case.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("noa_iterations=0"), "stdout: {stdout}");
    let objective: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("objective="))
        .unwrap()
        .parse()
        .unwrap();
    // Frozen from the grid-search oracle (663.9 +- 0.5%).
    assert!((objective - 663.9).abs() / 663.9 < 5e-3, "objective {objective}");

    let json = run(&["solve-opf", "--case", case.to_str().unwrap(), "--json"]);
    let text = String::from_utf8_lossy(&json.stdout);
    assert!(text.trim_start().starts_with('{') && text.contains("\"objective\""));
}

#[test]
fn solve_opf_rejects_inverted_voltage_bounds() {
    let dir = fresh_dir("solve_opf_bad");
    let case = dir.join("bad.case");
    std::fs::write(&case, pevgrid::bundled::CASE2.replace("2 20 5 0.9 1.1", "2 20 5 1.2 1.1")).unwrap();
    let out = run(&["solve-opf", "--case", case.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("voltage limits out of order"), "stderr: {err}");
}

#[test]
fn solve_opf_flags_infeasible_overload() {
    let dir = fresh_dir("solve_opf_overload");
    let case = dir.join("case2.case");
    std::fs::write(&case, pevgrid::bundled::CASE2).unwrap();
    // 10x the base load exceeds both line transfer and generation.
    let out = run(&["solve-opf", "--case", case.to_str().unwrap(), "--load-mult", "10"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generation capacity"), "stderr: {err}");
}

#[test]
fn rerunning_gen_scenario_is_byte_stable() {
    let dir_a = fresh_dir("gen_a");
    let dir_b = fresh_dir("gen_b");
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "gen-scenario",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "3",
            "--count-per-station",
            "1",
        ]);
        assert!(out.status.success());
    }
    for file in ["scenario.scn", "roster.csv", "load.csv", "price.csv", "case.case"] {
        let a = std::fs::read(dir_a.join(file)).unwrap();
        let b = std::fs::read(dir_b.join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}
