use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CliError, CliResult, Outcome};
use crate::data::{load_dataset, save_dataset, synth_gen, Dataset, SynthConfig};
use crate::distillation::{generate_soft_labels, SoftLabelSet};
use crate::evaluation::{cross_validate, evaluate_model, CvConfig, Variant};
use crate::model::{argmax, ArchSpec, TensorEncoding};
use crate::opcount;
use crate::qmodel::{quantize_model, tune_input_scales, AnyModel, InputScales};
use crate::rodata::{export_fp32_rodata, export_rodata, fp32_image_size, q7_image_size};
use crate::training::{softmax_t, train as train_model, Distill, KdConfig, Optimizer, TrainConfig};
use crate::Error;

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::usage(format!("missing required flag --{flag}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::from(Error::Io(e)))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

fn parse_arch(s: &str) -> CliResult<ArchSpec> {
    s.parse().map_err(CliError::from)
}

fn outcome(summary: Value, text: Vec<String>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Outcome {
    Outcome { summary, text, inputs, outputs, volatile_outputs: Vec::new() }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct GenDataArgs {
    /// Number of animals [default: 8]
    #[arg(long)]
    pub animals: Option<usize>,
    /// Windows per animal [default: 50]
    #[arg(long)]
    pub windows: Option<usize>,
    /// Samples per window [default: 64]
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(super) fn gen_data(a: &GenDataArgs) -> CliResult<Outcome> {
    let out = required(&a.out, "out")?;
    let cfg = SynthConfig {
        num_animals: a.animals.unwrap_or(8),
        windows_per_animal: a.windows.unwrap_or(50),
        sequence_length: a.seq_len.unwrap_or(64),
        seed: a.seed.unwrap_or(0),
    };
    let ds = synth_gen(&cfg)?;
    save_dataset(&ds, out)?;
    let summary = json!({
        "datapoints": ds.len(),
        "animals": ds.animals(),
        "class_histogram": ds.class_histogram(),
        "out": out.display().to_string(),
    });
    let text = vec![format!("wrote {} datapoints to {}", ds.len(), out.display()), crate::data::describe_histogram(&ds)];
    Ok(outcome(summary, text, vec![], vec![out.clone()]))
}

/// Shared by `train` and `distill`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainArgs {
    /// JSONL dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of classes in the dataset [default: 3]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Architecture such as gru(1,32) [default: gru(1,16)]
    #[arg(long)]
    pub arch: Option<String>,
    /// [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adam or sgd-momentum [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Global gradient-norm clip [default: 5]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hold this animal out and report validation MCC per epoch
    #[arg(long)]
    pub val_animal: Option<String>,
    /// Weight of the hard-label loss [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Softmax temperature of the soft-label loss [default: 3]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Teacher logits CSV (distill only)
    #[arg(long)]
    pub soft_labels: Option<PathBuf>,
    /// base64-f32le or nested [default: base64-f32le]
    #[arg(long)]
    pub encoding: Option<String>,
    /// Model JSON to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log JSON [default: <out>.log.json]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn parse_encoding(s: Option<&str>) -> CliResult<TensorEncoding> {
    match s.unwrap_or("base64-f32le") {
        "base64-f32le" | "base64" => Ok(TensorEncoding::Base64F32le),
        "nested" => Ok(TensorEncoding::Nested),
        other => Err(CliError::usage(format!("unknown encoding {other:?}; expected base64-f32le or nested"))),
    }
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let optimizer: Optimizer = match &a.optimizer {
        Some(s) => s.parse()?,
        None => d.optimizer,
    };
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
        optimizer,
        clip_norm: a.clip_norm.unwrap_or(d.clip_norm),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kd_config(alpha: Option<f64>, temperature: Option<f64>) -> CliResult<KdConfig> {
    let d = KdConfig::default();
    Ok(KdConfig::new(alpha.unwrap_or(d.alpha), temperature.unwrap_or(d.temperature))?)
}

fn split_by_animal(ds: &Dataset, val_animal: Option<&str>) -> CliResult<(Vec<u64>, Vec<u64>)> {
    let Some(v) = val_animal else {
        return Ok((ds.ids(), Vec::new()));
    };
    if !ds.animals().iter().any(|a| a == v) {
        return Err(CliError::usage(format!("animal {v:?} does not occur in the dataset")));
    }
    let (val, tr): (Vec<_>, Vec<_>) = ds.datapoints().iter().partition(|p| p.animal == v);
    Ok((tr.iter().map(|p| p.id).collect(), val.iter().map(|p| p.id).collect()))
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    mean_loss: f64,
    val_mcc: Option<f64>,
}

pub(super) fn train(a: &TrainArgs, distill: bool) -> CliResult<Outcome> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let spec = parse_arch(a.arch.as_deref().unwrap_or("gru(1,16)"))?;
    let cfg = train_config(a)?;
    let encoding = parse_encoding(a.encoding.as_deref())?;
    if !distill && (a.soft_labels.is_some() || a.alpha.is_some() || a.temperature.is_some()) {
        return Err(CliError::usage("--soft-labels, --alpha and --temperature belong to `kdq7 distill`"));
    }
    let ds = load_dataset(data, a.num_classes.unwrap_or(3))?;
    let (train_ids, val_ids) = split_by_animal(&ds, a.val_animal.as_deref())?;
    let mut inputs = vec![data.clone()];
    let soft;
    let kd = if distill {
        let path = required(&a.soft_labels, "soft-labels")?;
        soft = SoftLabelSet::load_csv(path)?;
        inputs.push(path.clone());
        Some(Distill { config: kd_config(a.alpha, a.temperature)?, soft_labels: &soft })
    } else {
        None
    };
    let result = train_model(&ds, &train_ids, &val_ids, spec, &cfg, kd)?;
    let mut model = result.model;
    if let Some(p) = &a.soft_labels {
        model.metadata.insert("teacher".into(), p.display().to_string());
    }
    model.save_json(out, encoding)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.json");
        PathBuf::from(s)
    });
    // timings stay out of the log so that reruns are byte-identical
    let lines: Vec<LogLine> =
        result.log.iter().map(|e| LogLine { epoch: e.epoch, mean_loss: e.mean_loss, val_mcc: e.val_mcc }).collect();
    write_file(&log_path, pretty(&lines).as_bytes())?;
    let last = result.log.last();
    let summary = json!({
        "arch": spec.to_string(),
        "training": model.metadata.get("training"),
        "train_datapoints": train_ids.len(),
        "val_datapoints": val_ids.len(),
        "final_loss": last.map(|e| e.mean_loss),
        "final_val_mcc": last.and_then(|e| e.val_mcc),
        "params": model.arch.count_params(),
        "out": out.display().to_string(),
    });
    let mut text = vec![format!("trained {spec} on {} datapoints for {} epochs", train_ids.len(), cfg.epochs)];
    if let Some(e) = last {
        text.push(format!("final loss {:.5}{}", e.mean_loss, e.val_mcc.map(|m| format!(", validation MCC {m:.4}")).unwrap_or_default()));
    }
    text.push(format!("wrote {} and {}", out.display(), log_path.display()));
    Ok(outcome(summary, text, inputs, vec![out.clone(), log_path]))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TeacherLogitsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: the model's class count]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Soft-label CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(super) fn teacher_logits(a: &TeacherLogitsArgs) -> CliResult<Outcome> {
    let model_path = required(&a.model, "model")?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let model = AnyModel::load_json(model_path)?;
    let ds = load_dataset(data, a.num_classes.unwrap_or(model.arch().num_classes()))?;
    let set = generate_soft_labels(&model, &ds, &ds.ids())?;
    set.save_csv(out)?;
    let summary = json!({ "rows": set.len(), "num_classes": set.num_classes(), "out": out.display().to_string() });
    let text = vec![format!("wrote {} rows of teacher logits to {}", set.len(), out.display())];
    Ok(outcome(summary, text, vec![model_path.clone(), data.clone()], vec![out.clone()]))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct QuantizeArgs {
    /// Float model JSON
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Quantized model JSON to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input scale of the first GRU layer (power of two) [default: 1]
    #[arg(long)]
    pub sa: Option<f32>,
    /// Input scale of recurrent states and deeper layers [default: 1]
    #[arg(long)]
    pub sh: Option<f32>,
    /// Input scale of the MLP output layer [default: 1]
    #[arg(long)]
    pub sm: Option<f32>,
    /// Choose scales by grid search on --data
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub tune: Option<bool>,
    /// Calibration dataset for --tune
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: the model's class count]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Also write the packed Q7 weight image here
    #[arg(long)]
    pub rodata: Option<PathBuf>,
}

pub(super) fn quantize(a: &QuantizeArgs) -> CliResult<Outcome> {
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    let model = match AnyModel::load_json(model_path)? {
        AnyModel::Float(m) => m,
        AnyModel::Quantized(_) => return Err(CliError::usage("model is already quantized")),
    };
    let mut inputs = vec![model_path.clone()];
    let tune = a.tune.unwrap_or(false);
    let (scales, tuned) = if tune {
        if a.sa.is_some() || a.sh.is_some() || a.sm.is_some() {
            return Err(CliError::usage("--tune and explicit --sa/--sh/--sm are mutually exclusive"));
        }
        let data = required(&a.data, "data")?;
        inputs.push(data.clone());
        let ds = load_dataset(data, a.num_classes.unwrap_or(model.arch.num_classes()))?;
        let calib: Vec<(&[f32], usize)> = ds.datapoints().iter().map(|p| (&p.samples[..], p.label)).collect();
        let report = tune_input_scales(&model, &calib)?;
        (report.scales, Some(report))
    } else {
        (InputScales::new(a.sa.unwrap_or(1.0), a.sh.unwrap_or(1.0), a.sm.unwrap_or(1.0))?, None)
    };
    let mut q = quantize_model(&model, scales)?;
    q.metadata.insert("source".into(), model_path.display().to_string());
    q.save_json(out)?;
    let mut outputs = vec![out.clone()];
    let q7_bytes = q7_image_size(q.arch());
    let fp32_bytes = fp32_image_size(q.arch());
    if let Some(r) = &a.rodata {
        write_file(r, &export_rodata(&q))?;
        outputs.push(r.clone());
    }
    let summary = json!({
        "scales": scales,
        "tune": tuned,
        "rodata_q7_bytes": q7_bytes,
        "rodata_fp32_bytes": fp32_bytes,
        "rodata_ratio": q7_bytes as f64 / fp32_bytes as f64,
        "out": out.display().to_string(),
    });
    let mut text = vec![format!("scales s_a={} s_h={} s_m={}", scales.s_a, scales.s_h, scales.s_m)];
    if let Some(t) = &tuned {
        let mcc = t.mcc.map(|m| format!("calibration MCC {m:.4}, ")).unwrap_or_default();
        text.push(format!("tuned by {}: {mcc}logit MSE {:.3e}, input saturation {:.4}", t.objective, t.logit_mse, t.input_saturation));
    }
    text.push(format!("rodata {q7_bytes} bytes vs {fp32_bytes} bytes float ({:.1}%)", 100.0 * q7_bytes as f64 / fp32_bytes as f64));
    text.push(format!("wrote {}", out.display()));
    Ok(outcome(summary, text, inputs, outputs))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EvaluateArgs {
    /// Model to score (without --cv)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: 3, or the model's class count]
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Cross-validation scheme; only loao is supported
    #[arg(long)]
    pub cv: Option<String>,
    /// Student architecture for --cv [default: gru(1,8)]
    #[arg(long)]
    pub arch: Option<String>,
    /// Teacher architecture for --kd teacher [default: gru(1,32)]
    #[arg(long)]
    pub teacher_arch: Option<String>,
    /// Comma-separated variants: none, teacher, self [default: none]
    #[arg(long)]
    pub kd: Option<String>,
    /// [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Teacher epochs [default: --epochs]
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    /// Teacher learning rate [default: --lr]
    #[arg(long)]
    pub teacher_lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// [default: 3]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Also quantize every trained student (tuned scales)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub quantize: Option<bool>,
    /// Training windows per fold used to tune scales [default: all]
    #[arg(long)]
    pub calibration_size: Option<usize>,
    /// Report JSON to write
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_variants(s: &str) -> CliResult<Vec<Variant>> {
    s.split(',')
        .map(|v| match v.trim() {
            "none" => Ok(Variant::NoKd),
            "teacher" => Ok(Variant::Kd),
            "self" => Ok(Variant::SelfKd),
            other => Err(CliError::usage(format!("unknown --kd variant {other:?}; expected none, teacher or self"))),
        })
        .collect()
}

pub(super) fn evaluate(a: &EvaluateArgs) -> CliResult<Outcome> {
    let data = required(&a.data, "data")?;
    let report_path = a.report.clone();
    match a.cv.as_deref() {
        None => {
            let cv_only = a.arch.is_some() || a.teacher_arch.is_some() || a.kd.is_some() || a.quantize.is_some();
            if cv_only {
                return Err(CliError::usage("--arch, --teacher-arch, --kd and --quantize require --cv loao"));
            }
            let model_path = required(&a.model, "model")?;
            let model = AnyModel::load_json(model_path)?;
            let ds = load_dataset(data, a.num_classes.unwrap_or(model.arch().num_classes()))?;
            let report = evaluate_model(&model, &ds)?;
            let mut outputs = Vec::new();
            if let Some(p) = &report_path {
                write_file(p, pretty(&report).as_bytes())?;
                outputs.push(p.clone());
            }
            let kind = match model {
                AnyModel::Float(_) => "float",
                AnyModel::Quantized(_) => "quantized",
            };
            let text = vec![format!("{kind} model on {} datapoints: MCC {:.4}", report.n, report.mcc_multiclass)];
            let summary = json!({ "model_kind": kind, "report": report });
            Ok(outcome(summary, text, vec![model_path.clone(), data.clone()], outputs))
        }
        Some("loao") => {
            if a.model.is_some() {
                return Err(CliError::usage("--model is not used with --cv; models are trained per fold"));
            }
            let ds = load_dataset(data, a.num_classes.unwrap_or(3))?;
            let d = TrainConfig::default();
            let student = TrainConfig {
                learning_rate: a.lr.unwrap_or(d.learning_rate),
                epochs: a.epochs.unwrap_or(d.epochs),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                seed: a.seed.unwrap_or(0),
                ..d
            };
            let teacher = TrainConfig {
                learning_rate: a.teacher_lr.unwrap_or(student.learning_rate),
                epochs: a.teacher_epochs.unwrap_or(student.epochs),
                ..student
            };
            student.validate()?;
            teacher.validate()?;
            let defaults = CvConfig::default();
            let cfg = CvConfig {
                student: parse_arch(a.arch.as_deref().unwrap_or("gru(1,8)"))?,
                teacher: parse_arch(a.teacher_arch.as_deref().unwrap_or("gru(1,32)"))?,
                train: student,
                teacher_train: teacher,
                kd: kd_config(a.alpha, a.temperature)?,
                variants: parse_variants(a.kd.as_deref().unwrap_or("none"))?,
                quantize: a.quantize.unwrap_or(false),
                calibration_size: a.calibration_size.or(defaults.calibration_size),
            };
            let report = cross_validate(&ds, &cfg)?;
            let mut outputs = Vec::new();
            if let Some(p) = &report_path {
                write_file(p, pretty(&report).as_bytes())?;
                outputs.push(p.clone());
            }
            let mut text = vec![format!("leave-one-animal-out over {} animals, seed {}", report.animals.len(), report.seed)];
            if let Some(t) = &report.teacher {
                text.push(format!("teacher {}: MCC {:.4}", cfg.teacher, t.mcc_multiclass));
            }
            let mut mccs = serde_json::Map::new();
            for (name, v) in &report.variants {
                let q = v.quantized.as_ref().map(|q| q.mcc_multiclass);
                text.push(format!(
                    "{name}: MCC {:.4}{}",
                    v.float.mcc_multiclass,
                    q.map(|q| format!(", quantized {q:.4}")).unwrap_or_default()
                ));
                mccs.insert(name.clone(), json!({ "float": v.float.mcc_multiclass, "quantized": q }));
            }
            let summary = json!({
                "cv": "loao",
                "teacher_mcc": report.teacher.as_ref().map(|t| t.mcc_multiclass),
                "mcc": mccs,
            });
            Ok(outcome(summary, text, vec![data.clone()], outputs))
        }
        Some(other) => Err(CliError::usage(format!("unsupported --cv {other:?}; expected loao"))),
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct InferArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Window as JSON ([[x,y,z],...] or a flat array), or @FILE
    #[arg(long)]
    pub window_json: Option<String>,
    /// Also write the result here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_window(text: &str, n: usize, d: usize) -> CliResult<(Vec<f32>, Option<PathBuf>)> {
    let (json_text, file) = match text.strip_prefix('@') {
        Some(p) => (std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {p}: {e}")))?, Some(PathBuf::from(p))),
        None => (text.to_string(), None),
    };
    let bad = |m: String| CliError::usage(format!("malformed window: {m}"));
    let v: Value = serde_json::from_str(&json_text).map_err(|e| bad(e.to_string()))?;
    let rows = v.as_array().ok_or_else(|| bad("expected a JSON array".into()))?;
    let mut flat = Vec::with_capacity(n * d);
    let num = |x: &Value| x.as_f64().map(|f| f as f32).ok_or_else(|| bad(format!("{x} is not a number")));
    for r in rows {
        match r {
            Value::Array(row) => {
                if row.len() != d {
                    return Err(bad(format!("rows must have {d} values, found {}", row.len())));
                }
                for x in row {
                    flat.push(num(x)?);
                }
            }
            other => flat.push(num(other)?),
        }
    }
    if flat.len() != n * d {
        return Err(bad(format!("expected {n} samples of {d} values, found {} values", flat.len())));
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok((flat, file))
}

pub(super) fn infer(a: &InferArgs) -> CliResult<Outcome> {
    let model_path = required(&a.model, "model")?;
    let window = required(&a.window_json, "window-json")?;
    let model = AnyModel::load_json(model_path)?;
    let arch = *model.arch();
    let (w, file) = parse_window(window, arch.sequence_length(), arch.input_dim())?;
    let logits = model.logits(&w)?;
    let probs = softmax_t(&logits, 1.0f32);
    let class = argmax(&logits);
    let summary = json!({
        "class": class,
        "class_name": model.class_names()[class],
        "probabilities": probs,
        "logits": logits,
    });
    let mut outputs = Vec::new();
    if let Some(p) = &a.out {
        write_file(p, pretty(&summary).as_bytes())?;
        outputs.push(p.clone());
    }
    let mut inputs = vec![model_path.clone()];
    inputs.extend(file);
    let probs_text: Vec<String> =
        model.class_names().iter().zip(&probs).map(|(n, p)| format!("{n}={p:.4}")).collect();
    let text = vec![format!("{} ({})", model.class_names()[class], probs_text.join(" "))];
    Ok(outcome(summary, text, inputs, outputs))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Timed forward passes [default: 100]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Seed of the random benchmark window [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    model_kind: &'static str,
    arch: String,
    sequence_length: usize,
    repeats: usize,
    wall_ns_min: u64,
    wall_ns_median: u64,
    ops: opcount::OpCounts,
    float_mults_total: u64,
    int_mults_total: u64,
    count_mults: u64,
    model_file_bytes: u64,
    rodata_bytes: usize,
    rodata_q7_bytes: usize,
    rodata_fp32_bytes: usize,
    rodata_ratio: f64,
}

fn bench_window(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    (0..n * d).map(|_| normal.sample(&mut rng)).collect()
}

pub(super) fn bench(a: &BenchArgs) -> CliResult<Outcome> {
    let model_path = required(&a.model, "model")?;
    let repeats = a.repeats.unwrap_or(100);
    if repeats == 0 {
        return Err(CliError::usage("--repeats must be positive"));
    }
    let model = AnyModel::load_json(model_path)?;
    let arch = *model.arch();
    let w = bench_window(arch.sequence_length(), arch.input_dim(), a.seed.unwrap_or(0));
    let (first, ops) = opcount::measure(|| model.logits(&w));
    first?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.logits(std::hint::black_box(&w))?);
        times.push(t.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    let (kind, rodata_bytes) = match &model {
        AnyModel::Float(m) => ("float", export_fp32_rodata(m).len()),
        AnyModel::Quantized(q) => ("quantized", export_rodata(q).len()),
    };
    let q7 = q7_image_size(&arch);
    let fp32 = fp32_image_size(&arch);
    let report = BenchReport {
        model_kind: kind,
        arch: arch.spec().to_string(),
        sequence_length: arch.sequence_length(),
        repeats,
        wall_ns_min: times[0],
        wall_ns_median: times[repeats / 2],
        ops,
        float_mults_total: ops.float_mults(),
        int_mults_total: ops.int_mults(),
        count_mults: arch.count_mults(),
        model_file_bytes: std::fs::metadata(model_path).map_err(|e| CliError::from(Error::Io(e)))?.len(),
        rodata_bytes,
        rodata_q7_bytes: q7,
        rodata_fp32_bytes: fp32,
        rodata_ratio: q7 as f64 / fp32 as f64,
    };
    let mut outputs = Vec::new();
    let mut volatile = Vec::new();
    if let Some(p) = &a.out {
        write_file(p, pretty(&report).as_bytes())?;
        outputs.push(p.clone());
        volatile.push(p.clone());
    }
    let text = vec![
        format!("{kind} {} N={}: median {:.3} ms, min {:.3} ms over {repeats} runs", report.arch, report.sequence_length, report.wall_ns_median as f64 / 1e6, report.wall_ns_min as f64 / 1e6),
        format!(
            "multiplies: {} float in MVMs, {} int in MVMs, {} float elementwise (formula {})",
            ops.mvm_float_mults, ops.mvm_int_mults, ops.elementwise_float_mults, report.count_mults
        ),
        format!("rodata {} bytes (q7 {q7}, fp32 {fp32}, ratio {:.3})", rodata_bytes, report.rodata_ratio),
    ];
    Ok(Outcome { summary: to_json(&report), text, inputs: vec![model_path.clone()], outputs, volatile_outputs: volatile })
}
