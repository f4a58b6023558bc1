use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_trust");

fn trust(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("TRUST_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = trust(args);
    assert!(
        out.status.success(),
        "trust {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Rows of a headed CSV as numbers, skipping the leading index column.
fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn small_dataset(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-data",
        "--out",
        p(dir),
        "--image-size",
        "8",
        "--train",
        "80",
        "--val",
        "8",
        "--test",
        "6",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

const SMALL_MODEL: &str = r#"{"model": {"model": "trust", "patch_size": 2, "embed_dim": 8, "num_heads": 2,
 "encoder_depth": 2, "pool_grid": 2, "decoder_channels": [8, 4, 4, 2], "skip_sources": [2, 1],
 "skip_enabled": [true, true]}, "train": {"epochs": 2, "batch_size": 8, "learning_rate": 1e-3}}"#;

fn small_model_config(dir: &Path) -> PathBuf {
    let path = dir.join("model.json");
    std::fs::write(&path, SMALL_MODEL).unwrap();
    path
}

#[test]
fn gen_data_defaults_write_verified_splits() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "--out", p(&ds)]);
    let m = json(&ds.join("manifest.json"));
    assert_eq!(m["train"]["count"], 2000);
    assert_eq!(m["val"]["count"], 400);
    assert_eq!(m["test"]["count"], 400);
    for split in ["train", "val", "test"] {
        let file = m[split]["data"]["file"].as_str().unwrap();
        assert!(ds.join(file).is_file());
    }
    // `solve` loads through the checksum-verifying loader.
    ok(&[
        "solve",
        "--dataset",
        p(&ds),
        "--out",
        p(&tmp.path().join("s")),
        "--limit",
        "1",
        "--sparsity",
        "3",
    ]);
    let record = json(&ds.join("run.json"));
    assert_eq!(record["command"], "gen-data");
    assert_eq!(record["exit_status"], 0);
    assert_eq!(record["config"]["counts"]["train"], 2000);
}

#[test]
fn gen_data_same_seed_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a, &["--seed", "7"]);
    small_dataset(&b, &["--seed", "7"]);
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    for split in ["train", "val", "test"] {
        assert_eq!(ma[split], mb[split]);
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn gen_data_fourier_records_keep_fraction() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("f");
    small_dataset(&ds, &["--operator", "fourier", "--keep", "0.25"]);
    assert_eq!(json(&ds.join("manifest.json"))["spec"]["operator"]["keep"], 0.25);
}

#[test]
fn gen_data_invalid_spec_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = trust(&["gen-data", "--out", p(&tmp.path().join("x")), "--train", "0"]);
    assert_eq!(code(&out), 2);
    let out = trust(&["gen-data", "--out", p(&tmp.path().join("y")), "--operator", "mystery"]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&tmp.path().join("y/run.json"))["exit_status"], 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("spec.json");
    std::fs::write(
        &cfg,
        r#"{"image_size": 8, "seed": 5, "counts": {"train": 4, "val": 2, "test": 2}}"#,
    )
    .unwrap();
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "--manifest", p(&cfg), "--out", p(&ds), "--seed", "9"]);
    let spec = &json(&ds.join("manifest.json"))["spec"];
    assert_eq!(spec["seed"], 9);
    assert_eq!(spec["image_size"], 8);
    assert_eq!(spec["counts"]["val"], 2);

    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&trust(&["gen-data", "--config", p(&cfg), "--out", p(&ds)])), 2);
}

#[test]
fn verify_bound_orthonormal_grid_passes_with_tiny_deviation() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("ortho.csv");
    ok(&[
        "verify-bound",
        "--out",
        p(&csv),
        "--kinds",
        "orthonormal_square",
        "--grid",
        "12:12:2,16:16:3",
        "--trials",
        "200",
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1) {
        let max_dev: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert!(max_dev < 1e-10, "{line}");
    }
    assert!(tmp.path().join("ortho.run.json").is_file());
}

#[test]
fn verify_bound_exact_small_grid_passes() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("exact.csv");
    let gp = tmp.path().join("exact.dat");
    ok(&[
        "verify-bound",
        "--out",
        p(&csv),
        "--grid",
        "8:12:2,6:10:1,10:12:2",
        "--trials",
        "300",
        "--gnuplot",
        p(&gp),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.contains(",exact,")));
    assert!(std::fs::read_to_string(&gp).unwrap().starts_with("# gaussian_fat"));
}

#[test]
fn verify_bound_malformed_grid_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = trust(&["verify-bound", "--out", p(&tmp.path().join("g.csv")), "--grid", "8:12"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("m:n:k"));
    assert!(!tmp.path().join("g.csv").exists());
}

#[test]
fn missing_arguments_are_usage_errors() {
    assert_eq!(code(&trust(&["verify-bound"])), 2);
    assert_eq!(code(&trust(&["no-such-command"])), 2);
    let tmp = TempDir::new().unwrap();
    let out = Command::new(BIN)
        .args(["report", "--runs", p(tmp.path())])
        .env("TRUST_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn solve_identity_omp_hits_psnr_cap() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("id");
    small_dataset(&ds, &["--operator", "identity"]);
    let out = tmp.path().join("omp");
    ok(&["solve", "--dataset", p(&ds), "--out", p(&out), "--method", "omp"]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[3] == 240.0), "{rows:?}");
    let blob = std::fs::read(out.join("reconstructions.f64")).unwrap();
    assert_eq!(blob.len(), 6 * 64 * 8);
}

fn assert_rows_close(a: &Path, b: &Path, tol: f64) {
    let (a, b) = (csv_rows(&a.join("metrics.csv")), csv_rows(&b.join("metrics.csv")));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol, "{ra:?} vs {rb:?}");
        }
    }
}

fn solve_known_and_estimated(tmp: &Path, ds: &Path, method: &str) -> (PathBuf, PathBuf) {
    let known = tmp.join(format!("{method}_known"));
    let est = tmp.join(format!("{method}_est"));
    let common = [
        "--dataset",
        p(ds),
        "--method",
        method,
        "--sparsity",
        "10",
        "--max-iterations",
        "300",
    ];
    ok(&[&["solve", "--out", p(&known)][..], &common[..]].concat());
    ok(&[&["solve", "--out", p(&est), "--operator", "estimated"][..], &common[..]].concat());
    assert!(est.join("estimated_operator.json").is_file());
    (known, est)
}

#[test]
fn solve_estimated_operator_matches_known_on_noiseless_data() {
    // Pairs are stored as f32, so the fitted operator carries rounding noise;
    // ten pairs per unknown keep its effect on OMP well under the tolerance.
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("gauss");
    ok(&[
        "gen-data",
        "--out",
        p(&ds),
        "--image-size",
        "8",
        "--train",
        "640",
        "--val",
        "4",
        "--test",
        "6",
        "--seed",
        "2",
    ]);
    let (known, est) = solve_known_and_estimated(tmp.path(), &ds, "omp");
    assert_rows_close(&known, &est, 1e-6);

    // The identity survives f32 storage exactly, so every method agrees.
    let ds = tmp.path().join("id");
    small_dataset(&ds, &["--operator", "identity"]);
    for method in ["omp", "ista", "fista"] {
        let dir = tmp.path().join("id_runs");
        let (known, est) = solve_known_and_estimated(&dir, &ds, method);
        assert_rows_close(&known, &est, 1e-6);
    }
}

#[test]
fn solve_missing_dataset_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = trust(&[
        "solve",
        "--dataset",
        p(&tmp.path().join("nope")),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&tmp.path().join("o/run.json"))["exit_status"], 2);
}

#[test]
fn train_zero_lr_gives_flat_log_and_no_skip_runs() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds, &[]);
    let cfg = small_model_config(tmp.path());
    let out = tmp.path().join("flat");
    ok(&[
        "train",
        "--dataset",
        p(&ds),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--lr",
        "0",
        "--epochs",
        "3",
        "--skips",
        "none",
    ]);
    let rows = csv_rows(&out.join("epochs.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r == &rows[0]), "{rows:?}");
    let record = json(&out.join("run.json"));
    assert_eq!(
        record["config"]["model"]["skip_enabled"],
        serde_json::json!([false, false])
    );
    assert_eq!(record["config"]["train"]["learning_rate"], 0.0);
    for f in ["best.json", "best.bin", "last.json", "last.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn train_rejects_bad_flags() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds, &[]);
    let cfg = small_model_config(tmp.path());
    let base = ["train", "--dataset", p(&ds), "--config", p(&cfg)];
    for extra in [
        &["--out", p(&tmp.path().join("a")), "--skips", "101"][..],
        &["--out", p(&tmp.path().join("b")), "--loss", "l3"][..],
        &["--out", p(&tmp.path().join("c")), "--model", "resnet"][..],
        &["--out", p(&tmp.path().join("d")), "--model", "unet", "--skips", "none"][..],
        &["--out", p(&tmp.path().join("e")), "--batch-size", "0"][..],
    ] {
        assert_eq!(code(&trust(&[&base[..], extra].concat())), 2, "{extra:?}");
    }
}

#[test]
fn train_and_eval_are_reproducible_and_consistent() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds, &[]);
    let cfg = small_model_config(tmp.path());
    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|r| tmp.path().join(r)).collect();
    for r in &runs {
        ok(&[
            "train",
            "--dataset",
            p(&ds),
            "--out",
            p(r),
            "--config",
            p(&cfg),
            "--seed",
            "4",
        ]);
    }
    for f in ["epochs.csv", "best.bin", "last.bin", "last.json"] {
        assert_eq!(
            std::fs::read(runs[0].join(f)).unwrap(),
            std::fs::read(runs[1].join(f)).unwrap(),
            "{f}"
        );
    }

    let evals: Vec<PathBuf> = ["e1", "e2"].iter().map(|r| tmp.path().join("evals").join(r)).collect();
    let images = tmp.path().join("images");
    let ckpt = runs[0].join("best.json");
    for (i, e) in evals.iter().enumerate() {
        let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--dataset", p(&ds), "--out", p(e)];
        if i == 0 {
            args.extend(["--emit-images", p(&images)]);
        }
        ok(&args);
    }
    for f in ["metrics.csv", "report.json", "summary.json"] {
        assert_eq!(
            std::fs::read(evals[0].join(f)).unwrap(),
            std::fs::read(evals[1].join(f)).unwrap(),
            "{f}"
        );
    }

    let pgms: Vec<_> = std::fs::read_dir(&images)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(pgms.len(), 3 * 6);
    for tag in ["y", "x", "xhat"] {
        let bytes = std::fs::read(images.join(format!("0005_{tag}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    }

    // Aggregates recomputed from the per-image rows.
    let rows = csv_rows(&evals[0].join("metrics.csv"));
    let report = json(&evals[0].join("report.json"));
    for (col, name) in ["mse", "mae", "rmse", "psnr", "ssim", "fpr"].iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        let agg = &report["aggregate"][name];
        assert!(
            (agg["mean"].as_f64().unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0),
            "{name}"
        );
        assert!(
            (agg["std"].as_f64().unwrap() - std).abs() <= 1e-9 * std.max(1.0),
            "{name}"
        );
    }

    // Two run directories, one comparison row each.
    let solver = tmp.path().join("evals").join("omp");
    ok(&["solve", "--dataset", p(&ds), "--out", p(&solver), "--sparsity", "5"]);
    ok(&[
        "report",
        "--runs",
        p(&tmp.path().join("evals")),
        "--out",
        p(&tmp.path().join("table")),
    ]);
    let csv = std::fs::read_to_string(tmp.path().join("table/comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    for col in [
        "mse_mean",
        "mae_mean",
        "psnr_mean",
        "ssim_mean",
        "fpr_mean",
        "param_count",
    ] {
        assert!(lines[0].split(',').any(|c| c == col), "{col}");
    }
    assert!(lines[1].starts_with("e1,model,trust,test,6,2829,"), "{}", lines[1]);
    assert!(lines[3].starts_with("omp,solver,omp,test,6,,"), "{}", lines[3]);
    let md = std::fs::read_to_string(tmp.path().join("table/comparison.md")).unwrap();
    assert!(md.contains("| Params |") && md.contains("| 2829 |"));
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds, &[]);
    let cfg = small_model_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--dataset",
        p(&ds),
        "--out",
        p(&run),
        "--config",
        p(&cfg),
        "--epochs",
        "1",
    ]);
    let blob = run.join("best.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let out = trust(&[
        "eval",
        "--checkpoint",
        p(&run.join("best.json")),
        "--dataset",
        p(&ds),
        "--out",
        p(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn report_on_empty_runs_dir_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = trust(&["report", "--runs", p(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no run summaries"));
    assert_eq!(code(&trust(&["report", "--runs", p(&tmp.path().join("missing"))])), 2);
}
