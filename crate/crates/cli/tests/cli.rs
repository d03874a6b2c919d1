// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salve::bundle::{FEATURE_MAPS, GRADFAM_GRADS};
use salve::gradfam::FeatureMapStack;
use salve::{read_bundle, validate_dataset, Matrix, SaeParams, TensorBundle};

fn salve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salve"))
        .args(args)
        .env("SALVE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic bundle plus a short-trained SAE in `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let bench = dir.join("bench.salv");
    let sae = dir.join("sae.salv");
    let out = salve(&["synth", "--seed", "7", "--out", path_str(&bench)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = salve(&["train-sae", "--bundle", path_str(&bench), "--epochs", "20", "--out", path_str(&sae)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (bench, sae)
}

#[test]
fn synth_writes_a_readable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.salv");
    let out = salve(&["synth", "--seed", "7", "--out", path_str(&bench)]);
    assert_eq!(code(&out), 0);
    let bundle = read_bundle(std::fs::File::open(&bench).unwrap()).unwrap();
    let (ds, head) = validate_dataset(&bundle).unwrap();
    assert_eq!(ds.num_classes(), 10);
    assert_eq!(head.num_features(), ds.num_features());
    // Nothing but the output is left in the directory.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn sweep_csv_has_one_row_per_class_and_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    let curve = dir.path().join("curve.csv");
    let out = salve(&[
        "sweep", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--class", "4", "--direction", "suppress",
        "--alpha-max", "10", "--alpha-step", "0.1", "--out", path_str(&curve),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,class,accuracy"));
    assert_eq!(lines.count(), 10 * 101);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (bench_a, sae_a) = fixture(a.path());
    let (bench_b, sae_b) = fixture(b.path());
    assert_eq!(std::fs::read(&bench_a).unwrap(), std::fs::read(&bench_b).unwrap());
    assert_eq!(std::fs::read(&sae_a).unwrap(), std::fs::read(&sae_b).unwrap());
    let report = |dir: &Path, bench: &Path, sae: &Path| {
        let out = dir.join("report.json");
        let o = salve(&["report", "--bundle", path_str(bench), "--sae", path_str(sae), "--out", path_str(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    assert_eq!(report(a.path(), &bench_a, &sae_a), report(b.path(), &bench_b, &sae_b));
}

#[test]
fn report_has_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    let out = dir.path().join("report.json");
    let o = salve(&[
        "report", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--seeds", "1,2", "--epochs", "5",
        "--alpha-max", "2", "--alpha-step", "0.5", "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(doc["baseline_confusion"]["counts"].as_array().unwrap().len(), 10);
    let classes = doc["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 10);
    for c in classes {
        assert_eq!(c["curve"]["alphas"].as_array().unwrap().len(), 5);
        assert!(c.get("validity").is_some());
        assert!(c["alpha_crit"].get("numerical").is_some());
    }
    assert_eq!(doc["robustness"].as_array().unwrap().len(), 10);
}

#[test]
fn edit_and_rome_write_bundles_with_new_heads() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    let original = validate_dataset(&TensorBundle::read_file(&bench).unwrap()).unwrap().1;
    for args in [
        vec!["edit", "--sae", path_str(&sae), "--class", "2", "--alpha", "1.5"],
        vec!["rome", "--class", "2"],
    ] {
        let out = dir.path().join(format!("{}.salv", args[0]));
        let mut full = args.clone();
        full.extend(["--bundle", path_str(&bench), "--out", path_str(&out)]);
        let o = salve(&full);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let bundle = TensorBundle::read_file(&out).unwrap();
        let (_, head) = validate_dataset(&bundle).unwrap();
        assert_ne!(head.w, original.w, "{}", args[0]);
        assert_eq!(head.b, original.b);
        assert!(bundle.manifest_json().unwrap().get("edit").is_some());
    }
}

#[test]
fn steer_sweep_and_single_beta() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    let curve = dir.path().join("steer.csv");
    let o = salve(&[
        "steer", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--class", "1", "--alpha-max", "1",
        "--alpha-step", "0.25", "--out", path_str(&curve),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 1 + 10 * 5);

    let single = dir.path().join("steer.json");
    let o = salve(&[
        "steer", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--class", "1", "--beta", "0",
        "--format", "json", "--out", path_str(&single),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(single).unwrap()).unwrap();
    assert_eq!(doc["confusion"]["overall_accuracy"], 1.0);
}

#[test]
fn analyze_and_alpha_crit_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    let profile = dir.path().join("profile.csv");
    let o = salve(&["analyze", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--out", path_str(&profile)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&profile).unwrap().lines().count(), 11);

    let crit = dir.path().join("crit.json");
    let o = salve(&[
        "alpha-crit", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--class", "3", "--format", "json",
        "--out", path_str(&crit),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(crit).unwrap()).unwrap();
    assert_eq!(doc["samples"].as_array().unwrap().len(), 50);
}

#[test]
fn missing_root_for_one_sample_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, sae) = fixture(dir.path());
    // Test rows are grouped by class, 50 each; row 150 is class 3. A grid
    // that stops at 0.01 cannot reach a zero-crossing.
    let out = dir.path().join("one.csv");
    let o = salve(&[
        "alpha-crit", "--bundle", path_str(&bench), "--sae", path_str(&sae), "--class", "3", "--sample", "150",
        "--alpha-max", "0.01", "--alpha-step", "0.01", "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn gradfam_matches_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let maps = FeatureMapStack::from_channels(&[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 1.0]]]).unwrap();
    let mut bundle = TensorBundle::new();
    bundle.insert(FEATURE_MAPS, maps.to_tensor()).unwrap();
    let path = dir.path().join("maps.salv");
    std::fs::write(&path, bundle.to_bytes().unwrap()).unwrap();
    let params = SaeParams::new(
        Matrix::from_rows(&[[1.0, -1.0]]).unwrap(),
        vec![0.0],
        Matrix::from_rows(&[[1.0], [0.0]]).unwrap(),
        vec![0.0, 0.0],
    )
    .unwrap();
    let sae = dir.path().join("sae.salv");
    std::fs::write(&sae, params.to_bundle(&serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap();

    let expected = [[1.0 / 3.0, 2.0 / 3.0], [1.0, 1.0]];
    let check = |out: &Path| {
        let o = salve(&[
            "gradfam", "--bundle", path_str(&path), "--sae", path_str(&sae), "--feature", "0", "--format", "json",
            "--out", path_str(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
        for (i, row) in expected.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                let got = doc["heatmap"][i][j].as_f64().unwrap();
                assert!((got - want).abs() < 1e-6, "({i},{j}) {got} vs {want}");
            }
        }
        doc["source"].as_str().unwrap().to_owned()
    };
    assert_eq!(check(&dir.path().join("a.json")), "avgpool_analytic");

    let grads = FeatureMapStack::constant_channels(&[0.25, -0.25], 2, 2).unwrap();
    bundle.insert(GRADFAM_GRADS, grads.to_tensor()).unwrap();
    std::fs::write(&path, bundle.to_bytes().unwrap()).unwrap();
    assert_eq!(check(&dir.path().join("b.json")), "gradients");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = salve(&["synth", "--bogus", "--out", "x.salv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn help_exits_zero() {
    let o = salve(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("alpha-crit"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sae.salv");
    let o = salve(&["train-sae", "--bundle", path_str(&dir.path().join("nope.salv")), "--out", path_str(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_bundle_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.salv");
    std::fs::write(&bad, b"SALVnot really a bundle").unwrap();
    let o = salve(&["train-sae", "--bundle", path_str(&bad), "--out", path_str(&dir.path().join("o.salv"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_salve"))
        .args(["synth", "--out", path_str(&dir.path().join("b.salv"))])
        .env("SALVE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
