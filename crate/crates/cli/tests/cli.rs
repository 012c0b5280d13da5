use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conns::network::{save_model, Architecture, Model, ModelMeta, NetworkParams};
use conns::projection::ProjectionMode;
use serde_json::{json, Value};
use tempfile::TempDir;

fn conns(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conns"))
        .args(args)
        .current_dir(dir)
        .env("CONNS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn shipped_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The shipped cubic config shrunk to a few short trajectories and a tiny net.
fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(shipped_dir().join("cubic_oscillator.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["integration"]["t_end"] = json!(0.1);
    v["data"]["n_train"] = json!(2);
    v["data"]["n_test"] = json!(3);
    v["train"]["arch"]["width"] = json!(4);
    v["train"]["arch"]["hidden_layers"] = json!(1);
    v["train"]["unconstrained"]["epochs"] = json!(5);
    v["train"]["constrained"]["epochs"] = json!(5);
    v["eval"]["vector_field"]["grid"]["points"] = json!(3);
    let path = dir.join("small.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

fn checkpoint(dir: &Path, gain: f64, mode: ProjectionMode) -> PathBuf {
    let mut params = NetworkParams::init(2, Architecture { width: 2, hidden_layers: 1, final_linear: true }, 0);
    for w in params.weights_mut() {
        w.fill_with_identity();
        *w *= gain;
    }
    let model = Model {
        params,
        meta: ModelMeta {
            system: "cubic_oscillator".into(),
            dt: 0.01,
            projection_mode: mode,
            eps_proj: 1e-3,
            normalization: None,
        },
    };
    let path = dir.join(format!("gain_{gain}.cnnm"));
    save_model(&model, &path).unwrap();
    path
}

#[test]
fn unknown_system_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["system"]["name"] = json!("lorenz");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = conns(&["--config", cfg.to_str().unwrap(), "simulate"], tmp.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&conns(&["--config", "absent.json", "generate"], tmp.path())), 2);
    assert_eq!(code(&conns(&["generate"], tmp.path())), 2);
}

#[test]
fn audit_flags_an_infeasible_constrained_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let bad = checkpoint(tmp.path(), 2.0, ProjectionMode::Spectral);
    let out = conns(&["audit", bad.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("feasible: false"));

    let good = checkpoint(tmp.path(), 0.5, ProjectionMode::Spectral);
    let out = conns(&["audit", good.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("feasible: true"));

    let free = checkpoint(tmp.path(), 2.0, ProjectionMode::None);
    assert_eq!(code(&conns(&["audit", free.to_str().unwrap()], tmp.path())), 0);
}

#[test]
fn simulate_writes_one_file_per_test_trajectory_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&conns(&["--config", cfg, "--out", out, "simulate"], tmp.path())), 0);
    }
    let csvs = |out: &str| {
        let mut names: Vec<PathBuf> = std::fs::read_dir(tmp.path().join(out).join("trajectories"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        names.sort();
        names
    };
    let (a, b) = (csvs("a"), csvs("b"));
    assert_eq!(a.len(), 3);
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
}

#[test]
fn constrained_training_needs_a_warm_start_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&conns(&["--config", cfg, "train", "constrained"], tmp.path())), 2);
    assert_eq!(code(&conns(&["--config", cfg, "generate"], tmp.path())), 0);
    assert_eq!(code(&conns(&["--config", cfg, "train", "constrained"], tmp.path())), 2);
    assert_eq!(code(&conns(&["--config", cfg, "eval"], tmp.path())), 2);
}

#[test]
fn full_pipeline_runs_on_a_tiny_problem() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for step in [&["generate"][..], &["train", "unconstrained"], &["train", "constrained"], &["eval"]] {
        let mut args = vec!["--config", cfg];
        args.extend_from_slice(step);
        let out = conns(&args, tmp.path());
        assert_eq!(code(&out), 0, "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = tmp.path().join("out");
    assert!(out.join("eval/metrics.csv").is_file());
    let audit = conns(&["audit", out.join("models/constrained.cnnm").to_str().unwrap()], tmp.path());
    assert_eq!(code(&audit), 0);
}
