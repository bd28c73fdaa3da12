use std::path::Path;
use std::process::Command;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lab"))
}

fn small_config(dir: &Path, ks_max: f64) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "n": 2,
        "r": 2,
        "gamma": { "kind": "phi_sl2z" },
        "norm": { "kind": "frobenius" },
        "start": { "kind": "pair", "first": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], "second": [[0.0, 0.0, 1.0]] },
        "T_ladder": [10.0, 20.0, 40.0],
        "stats": [{ "stat": "ks_theta" }, { "stat": "shape_bins", "bins": 12 }],
        "seed": 5,
        "thresholds": { "ks_theta_max": ks_max },
        "predicted_samples": 5000,
        "density_grid": 16,
        "quadrature": { "mc_samples": 20, "t_max": 12.0, "x_max": 100.0, "seed": 0 }
    });
    let p = dir.join(format!("config-{ks_max}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn enumerate_counts() {
    let out = lab().args(["enumerate", "-T", "10", "--count-only"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let bfs = lab().args(["enumerate", "-T", "10", "--method", "bfs", "--count-only"]).output().unwrap();
    let w: serde_json::Value = serde_json::from_slice(&bfs.stdout).unwrap();
    assert_eq!(v["count"], w["count"]);
}

#[test]
fn input_errors_exit_2() {
    assert_eq!(lab().args(["run", "/definitely/missing.json"]).status().unwrap().code(), Some(2));
    assert_eq!(lab().args(["enumerate", "-T", "5", "--norm", "bogus"]).status().unwrap().code(), Some(2));
    assert_eq!(lab().arg("frobnicate").status().unwrap().code(), Some(2));
}

#[test]
fn run_writes_outputs_and_exit_codes_follow_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let pass_out = dir.path().join("pass");
    let st = lab()
        .args(["run", small_config(dir.path(), 1.0).to_str().unwrap(), "--out", pass_out.to_str().unwrap()])
        .env("LAB_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    for f in ["report.json", "curves.csv", "histograms.csv"] {
        assert!(pass_out.join(f).exists(), "{f}");
    }
    let curves = std::fs::read_to_string(pass_out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 4);
    assert_eq!(lab().args(["report", pass_out.to_str().unwrap()]).status().unwrap().code(), Some(0));

    let fail_out = dir.path().join("fail");
    let st = lab()
        .args(["run", small_config(dir.path(), 0.0).to_str().unwrap(), "--out", fail_out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
    assert_eq!(lab().args(["report", fail_out.to_str().unwrap()]).status().unwrap().code(), Some(1));
}

#[test]
fn report_bytes_do_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1.0);
    let mut bodies = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        lab().args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).env("LAB_THREADS", threads).status().unwrap();
        bodies.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn predict_and_density_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab().args(["predict", small_config(dir.path(), 1.0).to_str().unwrap(), "--samples", "10"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 10);
    let out = lab().args(["density", "--case", "degenerate-low", "--grid", "8", "--samples", "50"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["values"].as_array().unwrap().len(), 8);
}
