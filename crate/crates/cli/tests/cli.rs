use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sejd_cli::BenchReport;

fn sejd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sejd"))
        .args(args)
        .env_remove("SEJD_THREADS")
        .output()
        .expect("spawn sejd")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train_small(dir: &Path, steps: &str) -> PathBuf {
    let out = dir.join(format!("run{steps}"));
    ok(&sejd(&[
        "train",
        "--steps",
        steps,
        "--layers",
        "2",
        "--channels",
        "8",
        "--blocks",
        "1",
        "--batch",
        "8",
        "--samples",
        "200",
        "--lr",
        "0.01",
        "--out",
        out.to_str().unwrap(),
    ]));
    out.join("model.sejd")
}

fn schema_validator() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/bench_report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn zero_step_training_writes_identity_checkpoint_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "0");
    let loss = fs::read_to_string(a.with_file_name("loss.csv")).unwrap();
    assert_eq!(loss, "step,loss\n");
    let b_dir = dir.path().join("again");
    fs::create_dir_all(&b_dir).unwrap();
    let b = train_small(&b_dir, "0");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let model = sejd_core::load_checkpoint(&a).unwrap();
    let x = sejd_core::Rng::new(1).normal_matrix(16, 4, 1.0);
    assert_eq!(sejd_core::flow::model_generate(&model, &x).unwrap(), x);
}

#[test]
fn bench_identity_checkpoint_has_zero_deviation_and_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "0");
    let json = dir.path().join("bench.json");
    let csv = dir.path().join("bench.csv");
    ok(&sejd(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--batch",
        "4",
        "--repeats",
        "2",
        "--json",
        json.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let validator = schema_validator();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let report: BenchReport = serde_json::from_value(value).unwrap();
    assert_eq!(report.modes.len(), 3);
    assert_eq!(report.sequential_layers, vec![1]);
    for m in &report.modes {
        assert_eq!(m.max_abs_deviation, 0.0, "{}", m.mode);
    }
    let seq = report.mode(sejd_core::DecodeMode::Sequential).unwrap();
    assert_eq!(seq.speedup, 1.0);
    assert!(report.mode(sejd_core::DecodeMode::Sejd).is_some());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("mode,median_s,speedup,max_dev,mean_nll,iters_layer1,iters_layer2\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn schema_rejects_malformed_reports() {
    let validator = schema_validator();
    let bad = serde_json::json!({ "checkpoint": "x", "tau": -1.0 });
    assert!(!validator.is_valid(&bad));
}

#[test]
fn trained_checkpoint_exact_jacobi_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "30");
    let stdout = ok(&sejd(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tau",
        "0",
        "--batch",
        "8",
        "--repeats",
        "1",
    ]));
    let report: BenchReport = serde_json::from_str(&stdout).unwrap();
    for m in &report.modes {
        assert!(m.max_abs_deviation <= 1e-4, "{}: {}", m.mode, m.max_abs_deviation);
    }
    let loss = fs::read_to_string(ckpt.with_file_name("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
}

#[test]
fn analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let identity = train_small(dir.path(), "0");
    let id = identity.to_str().unwrap();

    let csv = ok(&sejd(&[
        "analyze",
        "redundancy",
        "--checkpoint",
        id,
        "--o",
        "0",
        "--samples",
        "3",
    ]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,cos_sim"));
    for line in lines {
        let cos: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((cos - 1.0).abs() < 1e-9, "{line}");
    }

    let csv = ok(&sejd(&["analyze", "convergence", "--checkpoint", id]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,iter,step_inf,err_l2"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{line}");
    }

    let trained = train_small(dir.path(), "30");
    let csv = ok(&sejd(&[
        "analyze",
        "convergence",
        "--checkpoint",
        trained.to_str().unwrap(),
    ]));
    for line in csv.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("16")) {
        let err: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(err <= 1e-5, "{line}");
    }
}

#[test]
fn ablation_rows_and_monotone_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "30");
    let csv = ok(&sejd(&[
        "ablate-tau",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--taus",
        "0,0.05,0.5,2",
        "--batch",
        "4",
        "--repeats",
        "1",
    ]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau,time_s,max_dev,mean_iters"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0][2] <= 1e-4);
    assert!(rows.iter().any(|r| r[0] == 0.5));
    for w in rows.windows(2) {
        assert!(w[1][3] <= w[0][3]);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "0");
    let c = ckpt.to_str().unwrap();

    let missing = sejd(&["bench", "--checkpoint", "/nonexistent/model.sejd"]);
    assert_eq!(missing.status.code(), Some(1));
    let too_far = sejd(&["analyze", "redundancy", "--checkpoint", c, "--o", "16"]);
    assert_eq!(too_far.status.code(), Some(2));
    let empty = sejd(&["ablate-tau", "--checkpoint", c, "--taus", ""]);
    assert_eq!(empty.status.code(), Some(2));
    let bad_layers = sejd(&[
        "train",
        "--layers",
        "0",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(bad_layers.status.code(), Some(2));
    let unknown = sejd(&["bench"]);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_env = Command::new(env!("CARGO_BIN_EXE_sejd"))
        .args(["bench", "--checkpoint", c])
        .env("SEJD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}
