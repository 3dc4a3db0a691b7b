use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn qnetopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnetopt"))
        .args(args)
        .env_remove("QNETOPT_SEED")
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, command: &str, network: &str, costs: &str, extra: &[&str]) -> Output {
    let network = fixture(network);
    let costs = fixture(costs);
    let mut args = vec![
        command,
        "--network",
        network.to_str().unwrap(),
        "--costs",
        costs.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    qnetopt(&args)
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn printed_value(out: &Output) -> f64 {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix("value= "))
        .expect("value line")
        .trim()
        .parse()
        .unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_fh_low_routing_cost_switches_once() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let policy = read_json(dir.path().join("policy.json"));
    let control = &policy["controls"][0];
    assert_eq!(control["initial"].as_f64(), Some(1.0));
    let switches = control["switches"].as_array().unwrap();
    assert_eq!(switches.len(), 1);
    let t = switches[0].as_f64().unwrap();
    assert!((t - (10.0 - 3.0_f64.ln())).abs() < 1e-3);

    let costate = read_json(dir.path().join("costate.json"));
    assert_eq!(costate["kind"], "finite_horizon");
    let y0: Vec<f64> = costate["value_coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(printed_value(&out), 50.0 * y0[0]);
    // The costate and policy files agree on the switch time exactly.
    assert_eq!(costate["switch_times"][0][0].as_f64().unwrap(), t);
}

#[test]
fn solve_fh_high_routing_cost_never_routes() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v2.json",
        &["--x0", "50,0"],
    );
    assert_eq!(out.status.code(), Some(0));
    let policy = read_json(dir.path().join("policy.json"));
    assert_eq!(policy["controls"][0]["initial"].as_f64(), Some(0.0));
    assert!(policy["controls"][0]["switches"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn zero_costs_give_zero_value() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_zero.json",
        &["--x0", "7,3"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(printed_value(&out), 0.0);
    let policy = read_json(dir.path().join("policy.json"));
    assert_eq!(policy["controls"][0]["initial"].as_f64(), Some(0.0));
}

#[test]
fn json_summary_format() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0", "--format", "json"],
    );
    let doc: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(doc["value"].as_f64().unwrap() > 100.0);
    assert_eq!(doc["switch_times"][0].as_array().unwrap().len(), 1);
}

#[test]
fn solve_ih_closed_form() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-ih",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!((printed_value(&out) - 112.5).abs() < 1e-9);
    assert!(stdout(&out).contains("active_set= {1}"));
    let costate = read_json(dir.path().join("costate.json"));
    assert_eq!(costate["kind"], "infinite_horizon");
    let y = costate["y"].as_array().unwrap();
    assert!((y[0].as_f64().unwrap() - 2.25).abs() < 1e-10);
    assert!((y[1].as_f64().unwrap() - 1.0).abs() < 1e-10);
    let policy = read_json(dir.path().join("policy.json"));
    assert!(policy["horizon"].is_null());

    let out = run_in(
        dir.path(),
        "solve-ih",
        "two_queue.json",
        "costs_v2.json",
        &["--x0", "50,0"],
    );
    assert!(stdout(&out).contains("active_set= {}"));
}

#[test]
fn solve_ih_single_queue() {
    let dir = TempDir::new().unwrap();
    let net = dir.path().join("single.json");
    fs::write(
        &net,
        r#"{"queues": [{"name": "A", "exit_rate": 0.5}], "u_max": 1.0}"#,
    )
    .unwrap();
    let costs = dir.path().join("costs.json");
    fs::write(&costs, r#"{"q": [3.0], "v": [], "c": [0.0], "T": 1.0}"#).unwrap();
    let out = qnetopt(&[
        "solve-ih",
        "--network",
        net.to_str().unwrap(),
        "--costs",
        costs.to_str().unwrap(),
        "--x0",
        "1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!((printed_value(&out) - 6.0).abs() < 1e-12);
}

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        run_in(
            dir.path(),
            "solve-fh",
            "two_queue.json",
            "costs_v1.json",
            &[],
        );
        let out = run_in(
            dir.path(),
            "simulate",
            "two_queue.json",
            "costs_v1.json",
            &["--x0", "50,0", "--trials", "1", "--seed", "42"],
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let csv_a = fs::read(a.path().join("trajectory_0.csv")).unwrap();
    let csv_b = fs::read(b.path().join("trajectory_0.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with(b"time,event,x_1,x_2\n0,,50,0\n"));
    let est = read_json(a.path().join("estimate.json"));
    assert!(est["std_error"].is_null());
    assert_eq!(est["trials"], 1);
}

#[test]
fn seed_can_come_from_the_environment() {
    let run = |seed: Option<&str>, dir: &Path| {
        run_in(dir, "solve-fh", "two_queue.json", "costs_v1.json", &[]);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qnetopt"));
        cmd.args([
            "simulate",
            "--network",
            fixture("two_queue.json").to_str().unwrap(),
            "--costs",
            fixture("costs_v1.json").to_str().unwrap(),
            "--x0",
            "20,0",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        match seed {
            Some(s) => cmd.env("QNETOPT_SEED", s),
            None => cmd.env_remove("QNETOPT_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.join("trajectory_0.csv")).unwrap()
    };
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    let from_env = run(Some("9"), a.path());
    let explicit = {
        run_in(b.path(), "solve-fh", "two_queue.json", "costs_v1.json", &[]);
        run_in(
            b.path(),
            "simulate",
            "two_queue.json",
            "costs_v1.json",
            &["--x0", "20,0", "--seed", "9"],
        );
        fs::read(b.path().join("trajectory_0.csv")).unwrap()
    };
    assert_eq!(from_env, explicit);
    assert_ne!(run(None, c.path()), from_env);
}

#[test]
fn simulated_mean_brackets_the_solved_value() {
    let dir = TempDir::new().unwrap();
    let solved = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0"],
    );
    let value = printed_value(&solved);
    let out = run_in(
        dir.path(),
        "simulate",
        "two_queue.json",
        "costs_v1.json",
        &[
            "--x0", "50,0", "--trials", "1000", "--seed", "7", "--paths", "3",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let est = read_json(dir.path().join("estimate.json"));
    let mean = est["mean"].as_f64().unwrap();
    let se = est["std_error"].as_f64().unwrap();
    assert!((mean - value).abs() <= 3.0 * se, "{mean} ± {se} vs {value}");
    assert_eq!(est["ci95"].as_array().unwrap().len(), 2);
    for i in 0..3 {
        assert!(dir.path().join(format!("trajectory_{i}.csv")).exists());
    }
}

#[test]
fn empty_network_costs_nothing() {
    let dir = TempDir::new().unwrap();
    run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    let out = run_in(
        dir.path(),
        "simulate",
        "two_queue.json",
        "costs_v1.json",
        &["--trials", "10"],
    );
    assert_eq!(out.status.code(), Some(0));
    let est = read_json(dir.path().join("estimate.json"));
    assert_eq!(est["mean"].as_f64().unwrap(), 0.0);
}

#[test]
fn simulate_rejects_horizon_mismatch() {
    let dir = TempDir::new().unwrap();
    run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    let short = dir.path().join("short.json");
    fs::write(
        &short,
        r#"{"q": [2.5, 1.0], "v": [1.0], "c": [0.0, 0.0], "T": 5.0}"#,
    )
    .unwrap();
    let out = qnetopt(&[
        "simulate",
        "--network",
        fixture("two_queue.json").to_str().unwrap(),
        "--costs",
        short.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_passes_on_the_solved_costate() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "validate",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report = read_json(dir.path().join("validation.json"));
    assert_eq!(report["passed"], Value::Bool(true));
    assert_eq!(report["states"], 28);
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "vi-value",
            "vi-state-independence",
            "mean-ode-cost",
            "kolmogorov-mean",
            "hjb-residual"
        ]
    );
}

#[test]
fn validate_infinite_horizon_costate() {
    let dir = TempDir::new().unwrap();
    run_in(
        dir.path(),
        "solve-ih",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    let costate = dir.path().join("costate.json");
    let out = run_in(
        dir.path(),
        "validate",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "50,0", "--costate", costate.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn validate_detects_a_perturbed_costate() {
    let dir = TempDir::new().unwrap();
    run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    let mut doc = read_json(dir.path().join("costate.json"));
    for row in doc["y"].as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = Value::from(v.as_f64().unwrap() + 0.1);
        }
    }
    let bad = dir.path().join("perturbed.json");
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run_in(
        dir.path(),
        "validate",
        "two_queue.json",
        "costs_v1.json",
        &["--mode", "hjb", "--costate", bad.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    let report = read_json(dir.path().join("validation.json"));
    assert_eq!(report["checks"][0]["name"], "hjb-residual");
    assert_eq!(report["checks"][0]["passed"], Value::Bool(false));
}

#[test]
fn validate_with_empty_state_space_passes() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "validate",
        "two_queue.json",
        "costs_v1.json",
        &["--oracle-n", "0"],
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validate_three_queue_fork() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "validate",
        "fork.json",
        "fork_costs.json",
        &["--x0", "10,2,0", "--oracle-n", "4"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn validate_refuses_oversized_state_space() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "validate",
        "two_queue.json",
        "costs_v1.json",
        &["--oracle-n", "1000", "--state-cap", "1000"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("501501"));
}

fn csv_rows(path: PathBuf) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn emit_plot_writes_all_series() {
    let dir = TempDir::new().unwrap();
    let x0 = ["--x0", "50,0"];
    run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &x0,
    );
    run_in(
        dir.path(),
        "simulate",
        "two_queue.json",
        "costs_v1.json",
        &x0,
    );
    let out = run_in(
        dir.path(),
        "emit-plot",
        "two_queue.json",
        "costs_v1.json",
        &x0,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (header, rows) = csv_rows(dir.path().join("policy_vs_time.csv"));
    assert_eq!(header, "time,u_1");
    assert!(rows.iter().all(|r| r[1] == 0.0 || r[1] == 1.0));
    assert_eq!(rows.first().unwrap()[1], 1.0);
    assert_eq!(rows.last().unwrap()[1], 0.0);

    let (header, rows) = csv_rows(dir.path().join("value_grid.csv"));
    assert_eq!(header, "x_1,x_2,V");
    assert_eq!(rows.len(), 121);
    let slope = |x1: f64, x2: f64| rows.iter().find(|r| r[0] == x1 && r[1] == x2).unwrap()[2];
    let (a, b) = (slope(1.0, 0.0), slope(0.0, 1.0));
    for r in &rows {
        assert!((r[2] - (a * r[0] + b * r[1])).abs() <= 1e-9 * r[2].abs().max(1.0));
    }

    let (header, rows) = csv_rows(dir.path().join("mean.csv"));
    assert_eq!(header, "time,mu_1,mu_2");
    assert_eq!(rows[0], vec![0.0, 50.0, 0.0]);

    let (header, rows) = csv_rows(dir.path().join("states.csv"));
    assert_eq!(header, "time,x_1,x_2");
    assert!(!rows.is_empty());
}

#[test]
fn emit_plot_from_empty_trajectory() {
    let dir = TempDir::new().unwrap();
    run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    run_in(
        dir.path(),
        "simulate",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    let out = run_in(
        dir.path(),
        "emit-plot",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert_eq!(text, "time,x_1,x_2\n");
}

#[test]
fn emit_plot_requires_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "emit-plot",
        "two_queue.json",
        "costs_v1.json",
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &["--x0", "1,2,3"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "solve-fh", "missing.json", "costs_v1.json", &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "solve-fh", "fork.json", "costs_v1.json", &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(
        dir.path(),
        "solve-fh",
        "two_queue.json",
        "costs_v1.json",
        &["--dt", "-1"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = qnetopt(&["solve-fh"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_exit_is_rejected_for_infinite_horizon() {
    let dir = TempDir::new().unwrap();
    let net = dir.path().join("trap.json");
    fs::write(
        &net,
        r#"{"queues": [{"name": "A"}, {"name": "B", "exit_rate": 1.0}], "routes": [{"from": "B", "to": "A"}], "u_max": 1.0}"#,
    )
    .unwrap();
    let out = qnetopt(&[
        "solve-ih",
        "--network",
        net.to_str().unwrap(),
        "--costs",
        fixture("costs_v1.json").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
}
