use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const LINE_CSV: &str = "dn,dg,e,sigma0\n0,0,0.0,0.01\n1,0,0.5,0.01\n2,0,1.0,0.01\n3,0,1.5,0.01\n4,0,2.0,0.01\n";

const QUADRATIC_CSV: &str = "\
dn,dg,e,sigma0
0,0.0,0.0012,0.01
0,0.5,0.0263,0.01
0,1.0,0.0703,0.01
0,1.5,0.1442,0.01
0,2.0,0.2361,0.01
0,2.5,0.3555,0.01
0,3.0,0.5004,0.01
0,3.5,0.6678,0.01
0,4.0,0.8613,0.01
0,4.5,1.0782,0.01
0,5.0,1.3197,0.01
";

fn biodose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biodose"))
        .args(args)
        .env_remove("BIODOSE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture directory shared by the dose and simulate tests.
fn fixtures() -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = biodose(&["--reference-fixtures", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn without_timestamp(mut v: Value) -> Value {
    v["manifest"].as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn fit_recovers_exact_line() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "line.csv", LINE_CSV);
    let res = dir.path().join("res.csv");
    let o = biodose(&["fit", "--data", s(&data), "--kind", "linear_neutron", "--engine", "ls", "--residuals", s(&res)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    let params = v["result"]["model"]["params"].as_array().unwrap();
    assert!((params[0].as_f64().unwrap() - 0.5).abs() < 1e-8, "{params:?}");
    assert_eq!(v["manifest"]["subcommand"], "fit");
    let text = fs::read_to_string(&res).unwrap();
    assert!(text.starts_with("dn,dg,e,yfit,weight\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn robust_fit_reports_uncertainties() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "q.csv", QUADRATIC_CSV);
    let out = dir.path().join("fit.json");
    let o = biodose(&["fit", "--data", s(&data), "--kind", "linear_quadratic_gamma", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["result"]["converged"], true);
    assert_eq!(v["uncertainties"]["hessian"].as_array().unwrap().len(), 3);
}

#[test]
fn poisson_engine_rejects_other_kinds() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "line.csv", LINE_CSV);
    let o = biodose(&["fit", "--data", s(&data), "--kind", "linear_quadratic_gamma", "--engine", "poisson"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("poisson"), "{}", stderr(&o));
}

#[test]
fn missing_sigma_names_both_remedies() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "bad.csv", "dn,dg,e\n0,0,0.1\n1,0,0.5\n");
    let o = biodose(&["fit", "--data", s(&data), "--kind", "linear_neutron"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("sigma0") && err.contains("cells"), "{err}");
}

#[test]
fn malformed_cell_reports_location() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "bad.csv", "dn,dg,e,sigma0\n0,0,0.1,0.01\n1,0,abc,0.01\n");
    let o = biodose(&["fit", "--data", s(&data), "--kind", "linear_neutron"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains('3') && err.contains('e'), "{err}");
}

#[test]
fn unknown_kind_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "line.csv", LINE_CSV);
    let o = biodose(&["fit", "--data", s(&data), "--kind", "cubic"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown curve kind"));
}

#[test]
fn select_prefers_quadratic() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "q.csv", QUADRATIC_CSV);
    let o = biodose(&["select", "--data", s(&data), "--kinds", "linear_neutron,linear_quadratic_gamma"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    assert_eq!(v["order"][0], "linear_quadratic_gamma");
    let w = &v["w_matrix"];
    assert_eq!(w[0][0].as_f64().unwrap(), 1.0);
    let (a, b) = (w[0][1].as_f64().unwrap(), w[1][0].as_f64().unwrap());
    assert!(a > 1.0 && (a * b - 1.0).abs() < 1e-9, "{a} {b}");
}

#[test]
fn select_single_kind_and_arbitrary_ranges() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "q.csv", QUADRATIC_CSV);
    let o = biodose(&["select", "--data", s(&data), "--kinds", "polynomial:2", "--ranges", "arbitrary"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    assert_eq!(v["w_matrix"], serde_json::json!([[1.0]]));
    assert!(v["ranking"][0]["excluded"].is_array());
}

#[test]
fn select_empty_kinds_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "q.csv", QUADRATIC_CSV);
    assert_eq!(code(&biodose(&["select", "--data", s(&data), "--kinds", ""])), 1);
    assert_eq!(code(&biodose(&["select", "--data", s(&data)])), 1);
}

#[test]
fn classical_split_at_half() {
    let fx = fixtures();
    let curve = fx.path().join("split_curve.json");
    let o = biodose(&["dose", "--curve", s(&curve), "--case", "yf=1.2", "--method", "classical", "--theta", "0.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    let (dg, dn) = (v["split"]["dg"].as_f64().unwrap(), v["split"]["dn"].as_f64().unwrap());
    assert!((dg - 1.3137).abs() < 1e-3 && (dn - 1.3137).abs() < 1e-3, "{dg} {dn}");
}

#[test]
fn classical_sweep_moves_dose_to_gamma() {
    let fx = fixtures();
    let dg: Vec<f64> = (1..=9)
        .map(|k| {
            let p = fx.path().join(format!("split_theta_{}.json", k as f64 / 10.0));
            let v: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
            v["split"]["dg"].as_f64().unwrap()
        })
        .collect();
    assert!(dg.windows(2).all(|w| w[1] > w[0]), "{dg:?}");
}

#[test]
fn simplified_low_dose_posterior_is_unimodal() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("post");
    let o = biodose(&[
        "dose",
        "--curve",
        s(&fx.path().join("low_dose_curve.json")),
        "--case",
        "w=1000,u=33",
        "--method",
        "simplified",
        "--prior",
        s(&fx.path().join("low_dose_prior.json")),
        "--posterior-csv",
        s(&prefix),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    for c in v["components"].as_array().unwrap() {
        assert_eq!(c["mode_count"], 1, "{c}");
    }
    let mut r = csv::Reader::from_path(dir.path().join("post.gamma.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["dose", "density"]);
    let rows: Vec<(f64, f64)> = r.deserialize().map(|x| x.unwrap()).collect();
    let area: f64 = rows.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[1].1 + w[0].1)).sum();
    assert!((area - 1.0).abs() < 1e-6, "{area}");
    let peak = rows.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).unwrap().0;
    assert!(rows[..peak].windows(2).all(|w| w[1].1 >= w[0].1));
    assert!(rows[peak..].windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn theta_conflicts_with_prior() {
    let fx = fixtures();
    let o = biodose(&[
        "dose",
        "--curve",
        s(&fx.path().join("split_curve.json")),
        "--case",
        "yf=1.2",
        "--method",
        "quasi",
        "--theta",
        "0.5",
        "--prior",
        s(&fx.path().join("prior_beta.json")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_case_is_usage_error() {
    let fx = fixtures();
    let curve = fx.path().join("split_curve.json");
    let o = biodose(&["dose", "--curve", s(&curve), "--case", "w=1000", "--method", "classical", "--theta", "0.5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--case"));
}

fn sim_config(fx: &TempDir, dir: &TempDir, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(fx.path().join("simulate_half.json")).unwrap()).unwrap();
    cfg["repetitions"] = 20.into();
    edit(&mut cfg);
    write(dir, "sim.json", &cfg.to_string())
}

#[test]
fn simulate_pure_gamma() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(&fx, &dir, |c| c["theta"] = serde_json::json!({"kind": "point_mass", "theta": 1.0}));
    let cells = dir.path().join("cells.csv");
    let o = biodose(&["simulate", "--config", s(&cfg), "--cells-csv", s(&cells)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = stdout_json(&o);
    assert_eq!(v["result"]["mean_dn"].as_f64().unwrap(), 0.0);
    assert!(v["result"]["mean_dg"].as_f64().unwrap() > 0.0);
    let text = fs::read_to_string(&cells).unwrap();
    assert!(text.starts_with("cell,u_n,u_g\n"));
    assert_eq!(text.lines().count(), 1001);
}

#[test]
fn simulate_is_reproducible_and_honors_env_seed() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(&fx, &dir, |_| {});
    let run = |seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_biodose"));
        c.args(["simulate", "--config", s(&cfg)]).env_remove("BIODOSE_SEED");
        if let Some(v) = seed {
            c.env("BIODOSE_SEED", v);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        without_timestamp(stdout_json(&o))
    };
    let a = run(Some("7"));
    assert_eq!(a, run(Some("7")));
    assert_eq!(a["manifest"]["seed"], 7);
    let b = run(Some("8"));
    assert_ne!(a["result"], b["result"]);
    let flag = biodose(&["simulate", "--config", s(&cfg), "--seed", "7"]);
    assert_eq!(without_timestamp(stdout_json(&flag))["result"], a["result"]);
}

#[test]
fn simulate_rejects_zero_cells() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(&fx, &dir, |c| c["cells"] = 0.into());
    let o = biodose(&["simulate", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn fixtures_are_complete() {
    let fx = fixtures();
    for name in [
        "split_curve.json",
        "low_dose_curve.json",
        "low_dose_prior.json",
        "prior_beta.json",
        "quasi_beta.json",
        "quasi_beta.gamma.csv",
        "low_dose_simplified.json",
        "low_dose_simplified.neutron.csv",
        "simulate_half.json",
        "WALKTHROUGH.md",
    ] {
        assert!(fx.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn help_and_missing_command() {
    let o = biodose(&["--help"]);
    assert_eq!(code(&o), 0);
    let o = biodose(&["fit", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sigma0"));
    assert_eq!(code(&biodose(&[])), 1);
    assert_eq!(code(&biodose(&["frobnicate"])), 1);
}
