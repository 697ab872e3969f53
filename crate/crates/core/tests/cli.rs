use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kdq7(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdq7")).current_dir(dir).args(args).output().expect("run kdq7")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kdq7(dir, args);
    assert!(out.status.success(), "kdq7 {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    kdq7(dir, args).status.code().unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.push("--json");
    serde_json::from_str(&ok(dir, &a)).unwrap()
}

fn small_data(dir: &Path) {
    ok(dir, &["gen-data", "--animals", "3", "--windows", "8", "--seq-len", "12", "--seed", "3", "--out", "d.jsonl"]);
}

#[test]
fn gen_data_writes_one_line_per_window_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-data", "--animals", "8", "--windows", "50", "--seq-len", "64", "--seed", "7", "--out", "a.jsonl"]);
    ok(d, &["gen-data", "--animals", "8", "--windows", "50", "--seq-len", "64", "--seed", "7", "--out", "b.jsonl"]);
    let a = std::fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 400);
    assert_eq!(a, std::fs::read_to_string(d.join("b.jsonl")).unwrap());
    let first: Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(first["samples"].as_array().unwrap().len(), 64);
    assert!(d.join("a.jsonl.manifest.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(d, &["gen-data", "--animals", "2"]), 2);
    assert_eq!(code(d, &["gen-data", "--animals", "two", "--out", "x"]), 2);
    small_data(d);
    assert_eq!(code(d, &["train", "--data", "d.jsonl", "--arch", "lstm(1,4)", "--out", "m.json"]), 2);
    assert_eq!(code(d, &["train", "--data", "missing.jsonl", "--out", "m.json"]), 2);
    assert_eq!(code(d, &["distill", "--data", "d.jsonl", "--out", "m.json"]), 2);
    assert_eq!(code(d, &["evaluate", "--data", "d.jsonl", "--cv", "kfold"]), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    std::fs::write(d.join("c.json"), r#"{"data": "d.jsonl", "arch": "gru(1,3)", "epochs": 1, "seed": 4}"#).unwrap();
    let s = json(d, &["--config", "c.json", "train", "--arch", "gru(1,5)", "--out", "m.json"]);
    assert_eq!(s["arch"], "gru(1,5)");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["metadata"]["epochs"], "1");
    assert_eq!(m["metadata"]["seed"], "4");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["arch"], "gru(1,5)");
    assert_eq!(manifest["config"]["epochs"], 1);
    assert_eq!(manifest["seed"], 4);
    std::fs::write(d.join("bad.json"), r#"{"epochz": 1}"#).unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "train", "--data", "d.jsonl", "--out", "m.json"]), 2);
}

#[test]
fn distill_with_alpha_one_equals_train() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    ok(d, &["train", "--data", "d.jsonl", "--arch", "gru(1,6)", "--epochs", "2", "--out", "t.json"]);
    ok(d, &["teacher-logits", "--model", "t.json", "--data", "d.jsonl", "--out", "soft.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("soft.csv")).unwrap().lines().count(), 1 + 24);
    let common = ["--data", "d.jsonl", "--arch", "gru(1,3)", "--epochs", "2", "--seed", "9"];
    ok(d, &[&["train"][..], &common, &["--out", "plain.json"]].concat());
    ok(d, &[&["distill"][..], &common, &["--soft-labels", "soft.csv", "--alpha", "1.0", "--out", "kd.json"]].concat());
    let tensors = |p: &str| -> Value {
        serde_json::from_str::<Value>(&std::fs::read_to_string(d.join(p)).unwrap()).unwrap()["tensors"].clone()
    };
    assert_eq!(tensors("plain.json"), tensors("kd.json"));
}

#[test]
fn soft_label_coverage_gap_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    ok(d, &["train", "--data", "d.jsonl", "--arch", "gru(1,3)", "--epochs", "1", "--out", "t.json"]);
    ok(d, &["teacher-logits", "--model", "t.json", "--data", "d.jsonl", "--out", "soft.csv"]);
    let csv = std::fs::read_to_string(d.join("soft.csv")).unwrap();
    let truncated: Vec<&str> = csv.lines().take(10).collect();
    std::fs::write(d.join("part.csv"), truncated.join("\n") + "\n").unwrap();
    assert_eq!(code(d, &["distill", "--data", "d.jsonl", "--soft-labels", "part.csv", "--out", "s.json"]), 3);
    std::fs::write(d.join("broken.jsonl"), "{\"id\": 1}\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "broken.jsonl", "--out", "s.json"]), 3);
}

#[test]
fn quantize_validates_scales_and_reports_tuning() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    ok(d, &["train", "--data", "d.jsonl", "--arch", "gru(1,4)", "--epochs", "1", "--out", "m.json"]);
    assert_eq!(code(d, &["quantize", "--model", "m.json", "--sa", "3", "--out", "q.json"]), 2);
    let s = json(d, &["quantize", "--model", "m.json", "--sa", "4", "--sh", "1", "--out", "q.json"]);
    assert_eq!(s["scales"]["s_a"], 4.0);
    let s = json(d, &["quantize", "--model", "m.json", "--tune", "--data", "d.jsonl", "--rodata", "q.bin", "--out", "qt.json"]);
    assert_eq!(s["tune"]["grid_points"], 343);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("qt.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["summary"]["scales"], s["scales"]);
    assert_eq!(std::fs::read(d.join("q.bin")).unwrap().len() as u64, s["rodata_q7_bytes"].as_u64().unwrap());
    assert_eq!(code(d, &["quantize", "--model", "qt.json", "--out", "qq.json"]), 2);
}

#[test]
fn evaluate_float_and_quantized_reports() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    ok(d, &["train", "--data", "d.jsonl", "--arch", "gru(1,4)", "--epochs", "2", "--out", "m.json"]);
    ok(d, &["quantize", "--model", "m.json", "--sa", "4", "--out", "q.json"]);
    for (model, report) in [("m.json", "rf.json"), ("q.json", "rq.json")] {
        ok(d, &["evaluate", "--model", model, "--data", "d.jsonl", "--report", report]);
        let r: Value = serde_json::from_str(&std::fs::read_to_string(d.join(report)).unwrap()).unwrap();
        assert_eq!(r["n"], 24);
        let mcc = r["mcc_multiclass"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&mcc));
        assert_eq!(r["confusion"].as_array().unwrap().len(), 3);
        assert_eq!(r["per_class"].as_object().unwrap().len(), 3);
    }
}

#[test]
fn memorized_micro_dataset_scores_one() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    // two trivially separable classes, constant windows
    let mut lines = String::new();
    for i in 0..12u64 {
        let label = (i % 2) as usize;
        let v = if label == 0 { 1.0 } else { -1.0 };
        let samples = vec![[v, v, v]; 4];
        lines.push_str(&serde_json::json!({"id": i, "animal": format!("A{}", i % 3), "label": label, "samples": samples}).to_string());
        lines.push('\n');
    }
    std::fs::write(d.join("micro.jsonl"), lines).unwrap();
    ok(d, &["train", "--data", "micro.jsonl", "--num-classes", "2", "--arch", "gru(1,4)", "--epochs", "60", "--lr", "0.02", "--batch-size", "4", "--out", "m.json"]);
    let s = json(d, &["evaluate", "--model", "m.json", "--data", "micro.jsonl"]);
    assert_eq!(s["report"]["mcc_multiclass"], 1.0);
}

#[test]
fn infer_zero_model_and_malformed_window() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let mut m = kdq7::GruMlp::<f32>::zeros(kdq7::Architecture::new(1, 4, 3, 5, 3).unwrap());
    m.params.mlp.b2 = vec![-1.0, 2.0, 0.5];
    m.save_json(d.join("zero.json"), kdq7::model::TensorEncoding::Nested).unwrap();
    let window = serde_json::to_string(&vec![[0.3, 0.1, -0.2]; 5]).unwrap();
    let s = json(d, &["infer", "--model", "zero.json", "--window-json", &window]);
    assert_eq!(s["class"], 1);
    assert_eq!(s["logits"], serde_json::json!([-1.0, 2.0, 0.5]));
    let p: f64 = s["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-6);
    assert_eq!(code(d, &["infer", "--model", "zero.json", "--window-json", "[[1,2,3]]"]), 2);
    assert_eq!(code(d, &["infer", "--model", "zero.json", "--window-json", "not json"]), 2);
}

#[test]
fn bench_reports_counts_and_sizes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let a = kdq7::Architecture::new(1, 32, 3, 256, 3).unwrap();
    kdq7::GruMlp::<f32>::init(a, 1).save_json(d.join("f.json"), Default::default()).unwrap();
    let s = json(d, &["bench", "--model", "f.json", "--repeats", "3"]);
    assert_eq!(s["int_mults_total"], 0);
    assert_eq!(s["float_mults_total"], a.count_mults());
    assert!(s["rodata_ratio"].as_f64().unwrap() <= 0.30);
    ok(d, &["quantize", "--model", "f.json", "--out", "q.json"]);
    let s = json(d, &["bench", "--model", "q.json", "--repeats", "3"]);
    assert_eq!(s["ops"]["mvm_float_mults"], 0);
    assert!(s["int_mults_total"].as_u64().unwrap() > 0);
}

#[test]
fn replay_detects_tampering() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_data(d);
    ok(d, &["replay", "d.jsonl.manifest.json"]);
    // a manifest whose recorded digest no longer matches what the command produces
    let path = d.join("d.jsonl.manifest.json");
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    std::fs::write(&path, m.to_string()).unwrap();
    assert_eq!(code(d, &["replay", "d.jsonl.manifest.json"]), 1);
}
