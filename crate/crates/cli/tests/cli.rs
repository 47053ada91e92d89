//! End-to-end behavior of the `ltcnet` binary: outputs, determinism, config
//! precedence, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltcnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "ltcnet {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

const SMALL_NET: &[&str] = &["--layers", "1", "--units", "6", "--unfold-steps", "2", "--learning-rate", "0.01"];

/// Small dataset plus a quickly trained model in a fresh directory.
fn trained(epochs: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--samples", "300", "--features", "6", "--separation", "3.0", "--out", "d.csv"],
    );
    let mut args = vec!["train", "--data", "d.csv", "--model", "m.json", "--report", "r.json", "--epochs", epochs];
    args.extend_from_slice(SMALL_NET);
    ok(dir.path(), &args);
    dir
}

#[test]
fn synth_is_deterministic_and_requires_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["synth", "--samples", "200", "--features", "5", "--separation", "2.0", "--seed", "42"];
    ok(d, &[&args[..], &["--out", "a.csv"]].concat());
    ok(d, &[&args[..], &["--out", "b.csv"]].concat());
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));
    let header = read(d, "a.csv").lines().next().unwrap().to_string();
    assert_eq!(header, "g1,g2,g3,g4,g5,CANCER_TYPE");
    assert_eq!(code(d, &args), 2);
    ok(d, &["synth", "--separation", "0", "--samples", "50", "--out", "z.csv"]);
    assert_eq!(read(d, "z.csv").lines().count(), 51);
}

#[test]
fn unwritable_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["synth", "--samples", "50", "--out", "missing/dir/d.csv"]), 2);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(code(d, &["train", "--no-such-flag"]), 2);
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["train", "--data", "absent.csv", "--model", "m.json", "--report", "r.json"]), 2);
    assert!(!d.join("m.json").exists());
}

#[test]
fn train_writes_model_and_report() {
    let dir = trained("3");
    let d = dir.path();
    let report = json(d, "r.json");
    assert_eq!(report["training"]["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(report["split_sizes"]["train"], 192);
    let model = json(d, "m.json");
    assert_eq!(model["format_version"], 1);
    assert_eq!(model["preprocessing"]["feature_names"].as_array().unwrap().len(), 6);
}

#[test]
fn train_is_byte_deterministic_and_routes_cell_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--samples", "200", "--features", "4", "--out", "d.csv"]);
    for name in ["a", "b"] {
        let (model, report) = (format!("{name}.json"), format!("{name}_report.json"));
        let mut args = vec!["train", "--data", "d.csv", "--model", &model, "--report", &report];
        args.extend_from_slice(&["--seed", "7", "--epochs", "2", "--cell", "lstm"]);
        args.extend_from_slice(SMALL_NET);
        ok(d, &args);
    }
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
    assert_eq!(read(d, "a_report.json"), read(d, "b_report.json"));
    assert_eq!(json(d, "a.json")["spec"]["layers"][0]["cell_kind"], "lstm");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--samples", "200", "--features", "4", "--out", "d.csv"]);
    std::fs::write(
        d.join("run.conf"),
        "# small run\nepochs = 2\nunits = 3\nlayers=1\nunfold_steps=2\ndata=d.csv\nmodel=m.json\nreport=r.json\n",
    )
    .unwrap();
    ok(d, &["train", "--config", "run.conf"]);
    assert_eq!(json(d, "r.json")["training"]["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(json(d, "m.json")["spec"]["layers"][0]["units"], 3);
    ok(d, &["train", "--config", "run.conf", "--epochs", "1"]);
    assert_eq!(json(d, "r.json")["training"]["epochs"].as_array().unwrap().len(), 1);

    std::fs::write(d.join("bad.conf"), "epochs=2\nbogus_key=1\n").unwrap();
    let out = run(d, &["train", "--config", "bad.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    assert_eq!(code(d, &["train", "--config", "run.conf", "--dropout", "1.5"]), 2);
}

#[test]
fn evaluate_reports_all_metric_families_and_roc() {
    let dir = trained("25");
    let d = dir.path();
    ok(d, &["evaluate", "--model", "m.json", "--data", "d.csv", "--out", "metrics.json"]);
    let report = json(d, "metrics.json");
    let metrics = &report["metrics"];
    for key in ["accuracy", "auc_roc", "confusion_matrix"] {
        assert!(!metrics[key].is_null(), "{key} missing");
    }
    for key in ["precision", "recall", "f1"] {
        assert!(metrics["per_class"][1][key].is_number(), "{key} missing");
    }
    let ci = &report["accuracy_ci"];
    assert!(ci["lower"].as_f64().unwrap() <= ci["upper"].as_f64().unwrap());

    let roc = read(d, "roc.csv");
    let lines: Vec<&str> = roc.lines().collect();
    assert_eq!(lines[0], "fpr,tpr");
    assert_eq!(lines[1], "0,0");
    assert_eq!(*lines.last().unwrap(), "1,1");

    let training = json(d, "r.json");
    let best = training["training"]["best_epoch"].as_u64().unwrap() as usize;
    let val_acc = training["training"]["epochs"][best - 1]["val_accuracy"].as_f64().unwrap();
    assert!(metrics["accuracy"].as_f64().unwrap() >= val_acc - 0.05);

    ok(d, &["evaluate", "--model", "m.json", "--data", "d.csv", "--split", "test", "--out", "t.json", "--roc", "t.csv"]);
    assert_eq!(json(d, "t.json")["metrics"]["samples"], 60);
}

#[test]
fn feature_mismatch_names_the_counts() {
    let dir = trained("1");
    let d = dir.path();
    ok(d, &["synth", "--samples", "40", "--features", "5", "--out", "other.csv"]);
    let out = run(d, &["evaluate", "--model", "m.json", "--data", "other.csv", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains('6') && msg.contains('5'), "{msg}");
    assert!(!d.join("x.json").exists());
}

#[test]
fn predict_rows_are_probabilities_and_repeatable() {
    let dir = trained("2");
    let d = dir.path();
    ok(d, &["predict", "--model", "m.json", "--data", "d.csv", "--out", "p1.csv"]);
    ok(d, &["predict", "--model", "m.json", "--data", "d.csv", "--out", "p2.csv"]);
    let text = read(d, "p1.csv");
    assert_eq!(text, read(d, "p2.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_index,p_not_nf1,p_nf1,predicted_label"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 300);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        let (p0, p1): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        assert!((p0 + p1 - 1.0).abs() <= 1e-9);
        assert_eq!(row[3], if p1 > p0 { "1" } else { "0" });
    }

    // The label column is optional for prediction.
    let unlabeled: String = read(d, "d.csv")
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    std::fs::write(d.join("u.csv"), unlabeled).unwrap();
    ok(d, &["predict", "--model", "m.json", "--data", "u.csv", "--out", "p3.csv"]);
    assert_eq!(read(d, "p3.csv"), text);
}

#[test]
fn compare_verdicts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.json"), "[0.91, 0.93, 0.92, 0.95]").unwrap();
    std::fs::write(d.join("b.json"), "{\"values\": [0.80, 0.81, 0.79, 0.805]}").unwrap();
    std::fs::write(d.join("bad.json"), "[0.9,\n 0.8,,]").unwrap();
    std::fs::write(d.join("one.json"), "[0.9]").unwrap();

    ok(d, &["compare", "a.json", "a.json", "--out", "same.json"]);
    let same = json(d, "same.json");
    assert_eq!(same["test"]["p_value"], 1.0);
    assert_eq!(same["significant"], false);

    let out = ok(d, &["compare", "a.json", "b.json"]);
    let verdict: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["significant"], true);

    let out = run(d, &["compare", "a.json", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    assert_eq!(code(d, &["compare", "a.json", "one.json"]), 2);
}

#[test]
fn preprocess_writes_normalized_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--samples", "100", "--features", "3", "--out", "d.csv"]);
    ok(d, &["preprocess", "--data", "d.csv", "--out", "p.csv", "--stats", "s.json"]);
    let text = read(d, "p.csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_index,split,label,g1,g2,g3"));
    let splits: Vec<String> = lines.map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(splits.iter().filter(|s| *s == "train").count(), 64);
    assert_eq!(splits.iter().filter(|s| *s == "test").count(), 20);
    assert_eq!(json(d, "s.json")["stats"]["mean"].as_array().unwrap().len(), 3);
}

#[test]
fn ensemble_outputs_and_base_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--samples", "300", "--features", "6", "--separation", "3.0", "--out", "d.csv"]);
    let mut args = vec!["ensemble", "--data", "d.csv", "--bases", "ltc,logreg", "--out", "e.json", "--epochs", "5"];
    args.extend_from_slice(SMALL_NET);
    ok(d, &args);
    let report = json(d, "e.json");
    assert_eq!(report["combiner"]["meta_feature_width"], 4);
    assert!(report["combiner"]["test_metrics"]["auc_roc"].is_number());
    assert_eq!(report["logreg_base_coefficients"][0].as_array().unwrap().len(), 6);
    let coefficients = read(d, "coefficients.csv");
    assert_eq!(coefficients.lines().next(), Some("feature,weight"));
    assert_eq!(coefficients.lines().count(), 5);

    assert_eq!(code(d, &["ensemble", "--data", "d.csv", "--bases", "ltc,forest", "--out", "f.json"]), 2);
    assert!(!d.join("f.json").exists());
}
