use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hamshape::basis::{default_basis, Mode};
use hamshape::dataio::{synthetic_dataset, write_dataset_dir, AngleUnit, SyntheticConfig};
use hamshape::model::{Biped, GenCoord, ModelParams, PHI};
use hamshape::shaping::ShapingSpec;
use nalgebra::DVector;
use serde_json::{json, Value};

fn hamshape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamshape")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = hamshape(args);
    assert!(
        out.status.success(),
        "hamshape {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, cfg: Value) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn planted_config(subjects: usize, out: &str) -> Value {
    json!({
        "synthetic": {"subjects": subjects},
        "fit": {"stair_factor": 1.0, "weights": {"lambda": 0.0, "w0": 0.0}},
        "out": out,
    })
}

fn write_spec(dir: &Path, name: &str, alpha: Vec<f64>) -> PathBuf {
    let basis = default_basis(Mode::Phi);
    let spec = ShapingSpec::new(basis, DVector::from_vec(alpha)).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(&spec.to_file()).unwrap()).unwrap();
    path
}

#[test]
fn fit_smoke_writes_valid_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"synthetic": {"subjects": 3}, "mode": "wop", "out": "res"}));
    run_ok(&["fit", "--config", cfg.to_str().unwrap()]);
    let result = read_json(&dir.path().join("res/fit_wop.json"));
    assert_eq!(result["mode"], "wop");
    let ids = result["basis_ids"].as_array().unwrap();
    let alpha = result["alpha"].as_array().unwrap();
    assert_eq!(ids.len(), alpha.len());
    assert!(alpha.iter().all(|a| a.as_f64().unwrap().is_finite()));
    assert!(result["optimality_residual"].as_f64().unwrap() >= 0.0);
    assert!(result["config"]["weights"]["lambda"].is_number());
    let csv = std::fs::read_to_string(dir.path().join("res/fit_wop_torque.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task,phase,predicted_l,normative_l,predicted_r,normative_r,command_l_nm,command_r_nm"
    );
    assert_eq!(lines.count(), 8 * 150);
}

#[test]
fn planted_fixture_reaches_perfect_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), planted_config(4, "res"));
    run_ok(&["fit", "--config", cfg.to_str().unwrap(), "--mode", "phi"]);
    let result = read_json(&dir.path().join("res/fit_phi.json"));
    let metrics = result["per_task_metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 8);
    for m in metrics {
        assert!((m["sim_mean"].as_f64().unwrap() - 100.0).abs() < 0.1, "{m}");
        assert!((m["vaf_mean"].as_f64().unwrap() - 100.0).abs() < 0.1, "{m}");
    }
}

#[test]
fn fit_from_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let biped = Biped::new(ModelParams::default()).unwrap();
    let basis = default_basis(Mode::Phi);
    let alpha = DVector::from_fn(basis.len(), |i, _| 0.1 * ((i as f64) + 1.0).cos());
    let ds = synthetic_dataset(&basis, &alpha, &biped, SyntheticConfig { subjects: 2, ..Default::default() }).unwrap();
    write_dataset_dir(&ds, &dir.path().join("data"), AngleUnit::Deg).unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"dataset": "data", "fit": {"stair_factor": 1.0, "weights": {"lambda": 0.0, "w0": 0.0}}, "out": "res"}),
    );
    run_ok(&["fit", "--config", cfg.to_str().unwrap()]);
    let result = read_json(&dir.path().join("res/fit_phi.json"));
    for (got, want) in result["alpha"].as_array().unwrap().iter().zip(alpha.iter()) {
        assert!((got.as_f64().unwrap() - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"synthetic": {"subjects": 3}}));
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        run_ok(&["fit", "--config", cfg, "--out", out.to_str().unwrap()]);
        run_ok(&["cv", "--config", cfg, "--out", out.to_str().unwrap()]);
    }
    for file in ["fit_phi.json", "fit_phi_torque.csv", "cv_table.csv", "cv_phi.json", "cv_wop.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
}

#[test]
fn cv_table_on_planted_phi_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), planted_config(4, "res"));
    run_ok(&["cv", "--config", cfg.to_str().unwrap()]);
    let mut reader = csv::Reader::from_path(dir.path().join("res/cv_table.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "task", "sim_phi_mean", "sim_phi_sd", "sim_wop_mean", "sim_wop_sd", "vaf_phi_mean", "vaf_phi_sd",
            "vaf_wop_mean", "vaf_wop_sd"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let tasks: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(tasks, ["LG 1.0", "LG 1.45", "RA 5.2", "RA 11", "RD 5.2", "RD 11", "SA", "SD"]);
    for r in &rows {
        let phi: f64 = r[1].parse().unwrap();
        let wop: f64 = r[3].parse().unwrap();
        assert!(phi >= wop, "{r:?}");
        assert!((phi - 100.0).abs() < 0.1);
    }

    run_ok(&["report", "--config", cfg.to_str().unwrap()]);
    let summary = read_json(&dir.path().join("res/report.json"));
    assert_eq!(summary["tasks"], 8);
    assert_eq!(summary["phi_leads_sim"], 8);
    let report = std::fs::read_to_string(dir.path().join("res/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 9);
}

#[test]
fn lambda_sweep_writes_one_table_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"synthetic": {"subjects": 2, "points": 40}, "fit": {"points": 40}, "out": "res"}));
    run_ok(&["cv", "--config", cfg.to_str().unwrap(), "--lambda-sweep", "0,0.1"]);
    for l in ["0", "0.1"] {
        assert!(dir.path().join(format!("res/cv_table_lambda_{l}.csv")).exists());
    }
    let sweep = std::fs::read_to_string(dir.path().join("res/lambda_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "lambda,mode,mean_sim,mean_vaf");
    assert_eq!(sweep.lines().count(), 5);
}

#[test]
fn passive_simulation_conserves_energy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"simulation": {"initial_q": [0, 0, 0.08, 0.35, -0.2], "initial_qdot": [0, 0, 0.3, -0.6, 0.4]}, "out": "res"}),
    );
    run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let summary = read_json(&dir.path().join("res/simulation.json"));
    assert!((summary["final_t"].as_f64().unwrap() - 5.0).abs() < 1e-9);
    assert!(summary["max_rel_h_drift"].as_f64().unwrap() < 1e-6, "{summary}");
    let traj = std::fs::read_to_string(dir.path().join("res/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 501);
    for file in ["audit.csv", "matching_residual.csv"] {
        assert_eq!(std::fs::read_to_string(dir.path().join("res").join(file)).unwrap().lines().count(), 1 + 501);
    }
}

/// Stance angle at which gravity exerts no torque about the stance point.
fn balanced_phi(biped: &Biped, theta_l: f64, theta_r: f64) -> f64 {
    let g = |phi: f64| biped.grad_potential(&GenCoord::new(0.0, 0.0, phi, theta_l, theta_r))[PHI];
    let (mut lo, mut hi) = (-0.5, 0.5);
    assert!(g(lo) * g(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(lo) * g(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn gravity_compensation_holds_equilibrium() {
    let dir = tempfile::tempdir().unwrap();
    let biped = Biped::new(ModelParams::default()).unwrap();
    let (tl, tr) = (0.4, -0.2);
    let phi = balanced_phi(&biped, tl, tr);
    let alpha: Vec<f64> = (0..10).map(|i| 0.5 * ((i as f64) * 0.7).sin()).collect();
    let spec = write_spec(dir.path(), "spec.json", alpha);
    let cfg = write_config(
        dir.path(),
        json!({
            "simulation": {"duration": 1.0, "initial_q": [0, 0, phi, tl, tr], "human": {"kind": "gravity_compensating"}},
            "out": "res",
        }),
    );
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--spec", spec.to_str().unwrap()]);
    let summary = read_json(&dir.path().join("res/simulation.json"));
    assert!(summary["max_abs_displacement"].as_f64().unwrap() < 1e-9, "{summary}");
}

#[test]
fn compliant_spec_has_zero_matching_residual() {
    let dir = tempfile::tempdir().unwrap();
    let alpha: Vec<f64> = (0..10).map(|i| if i == 3 { -0.4 } else { 0.8 * ((i as f64) * 1.9 + 0.3).cos() }).collect();
    write_spec(dir.path(), "spec.json", alpha);
    let cfg = write_config(
        dir.path(),
        json!({
            "simulation": {
                "duration": 2.0,
                "initial_q": [0, 0, 0.1, 0.3, -0.1],
                "human": {"kind": "sinusoidal", "amplitude": [3, 1.5], "frequency_hz": 0.8, "phase": [0, 1]},
                "spec": "spec.json",
            },
            "out": "res",
        }),
    );
    run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let summary = read_json(&dir.path().join("res/simulation.json"));
    assert!(summary["max_matching_residual"].as_f64().unwrap() < 1e-12, "{summary}");
    let mut reader = csv::Reader::from_path(dir.path().join("res/matching_residual.csv")).unwrap();
    for r in reader.records() {
        let r = r.unwrap();
        assert!(r[4].parse::<f64>().unwrap().abs() < 1e-12);
    }
}

fn write_emg(dir: &Path, name: &str, mode: &str, gain: f64, signal: impl Fn(f64) -> f64) -> Value {
    let fs = 1000.0;
    let n = 5000;
    let mut csv = String::from("t,value\n");
    for i in 0..n {
        let t = i as f64 / fs;
        csv.push_str(&format!("{t},{}\n", gain * signal(t)));
    }
    let csv_path = dir.join(format!("{name}.csv"));
    let events_path = dir.join(format!("{name}.json"));
    std::fs::write(&csv_path, csv).unwrap();
    let events = json!({"muscle": "RF", "mode": mode, "events": [500, 1500, 2500, 3500, 4500]});
    std::fs::write(&events_path, events.to_string()).unwrap();
    json!({"csv": csv_path, "events": events_path})
}

fn burst(t: f64) -> f64 {
    let cycle = t.rem_euclid(1.0);
    let env = if (0.2..0.5).contains(&cycle) { 1.0 } else { 0.1 };
    env * (2.0 * std::f64::consts::PI * 80.0 * t).sin()
}

fn efforts(path: &Path) -> Vec<(String, String, f64)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader.records().map(|r| {
        let r = r.unwrap();
        (r[0].to_string(), r[1].to_string(), r[3].parse().unwrap())
    }).collect()
}

#[test]
fn emg_efforts_are_gain_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (tag, gain) in [("x1", 1.0), ("x2", 2.0)] {
        let records = vec![
            write_emg(dir.path(), &format!("{tag}_off"), "off", gain, burst),
            write_emg(dir.path(), &format!("{tag}_on"), "on", gain, |t| 0.6 * burst(t)),
        ];
        let cfg = write_config(dir.path(), json!({"emg": {"records": records}, "out": tag}));
        run_ok(&["emg", "--config", cfg.to_str().unwrap()]);
        runs.push(efforts(&dir.path().join(tag).join("emg_effort.csv")));
    }
    assert_eq!(runs[0].len(), 8);
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert_eq!((&a.0, &a.1), (&b.0, &b.1));
        assert!((a.2 - b.2).abs() < 1e-9 * a.2.abs().max(1.0), "{a:?} vs {b:?}");
    }
    let off: f64 = runs[0].iter().filter(|r| r.1 == "off").map(|r| r.2).sum();
    let on: f64 = runs[0].iter().filter(|r| r.1 == "on").map(|r| r.2).sum();
    assert!((on / off - 0.6).abs() < 1e-6);
}

#[test]
fn zero_emg_gives_zero_effort() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![write_emg(dir.path(), "quiet", "off", 1.0, |_| 0.0)];
    let cfg = write_config(dir.path(), json!({"emg": {"records": records}, "out": "res"}));
    run_ok(&["emg", "--config", cfg.to_str().unwrap()]);
    let rows = efforts(&dir.path().join("res/emg_effort.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.2 == 0.0));
}

fn exit_code(args: &[&str]) -> i32 {
    hamshape(args).status.code().expect("exited normally")
}

#[test]
fn exit_code_config() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = dir.path().join("bad.json");
    std::fs::write(&bad_json, "{ not json").unwrap();
    assert_eq!(exit_code(&["fit", "--config", bad_json.to_str().unwrap()]), 2);
    let cfg = write_config(dir.path(), json!({"simulation": {"dt": -1.0}}));
    assert_eq!(exit_code(&["simulate", "--config", cfg.to_str().unwrap()]), 2);
    assert_eq!(exit_code(&["fit"]), 2);
    assert_eq!(exit_code(&["cv", "--config", "/nonexistent/run.json"]), 2);
}

#[test]
fn exit_code_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(dir.path().join("data/S01.csv"), "foo,bar\n1,2\n").unwrap();
    let cfg = write_config(dir.path(), json!({"dataset": "data", "out": "res"}));
    assert_eq!(exit_code(&["fit", "--config", cfg.to_str().unwrap()]), 3);
    assert_eq!(exit_code(&["report", "--config", cfg.to_str().unwrap()]), 3);
}

#[test]
fn exit_code_solver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({"synthetic": {"subjects": 2, "points": 30}, "fit": {"points": 30, "solver": {"tol": 1e-300, "max_iter": 3}}, "out": "res"}),
    );
    assert_eq!(exit_code(&["fit", "--config", cfg.to_str().unwrap()]), 4);
    assert!(!dir.path().join("res/fit_phi.json").exists());
}

#[test]
fn exit_code_integration() {
    let dir = tempfile::tempdir().unwrap();
    // Strongly repelling quartic potential: the hips escape in finite time.
    let mut alpha = vec![0.0; 10];
    alpha[3] = 1e4;
    let spec = write_spec(dir.path(), "spec.json", alpha);
    let cfg = write_config(dir.path(), json!({"simulation": {"initial_q": [0, 0, 0, 0.8, -0.8], "dt": 1e-3}, "out": "res"}));
    assert_eq!(exit_code(&["simulate", "--config", cfg.to_str().unwrap(), "--spec", spec.to_str().unwrap()]), 5);
}
