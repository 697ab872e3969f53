//! Leave-one-animal-out cross-validation.
//!
//! Every fold trains its own models on the training animals only: the
//! teacher (when distilling), a plain student, a distilled student and a
//! self-distilled student, and optionally quantizes each student with
//! input scales tuned on training windows. Validation predictions of all
//! folds are pooled into one confusion matrix per variant.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{loao_splits, Dataset, Fold};
use crate::distillation::{generate_soft_labels, self_distill_from, Teacher};
use crate::metrics::{aggregate_folds, FoldPredictions, MetricsReport};
use crate::model::{ArchSpec, GruMlpModel};
use crate::qmodel::{quantize_model, tune_input_scales, AnyModel, InputScales};
use crate::training::{train, Distill, KdConfig, TrainConfig};
use crate::{Error, Result};

/// SplitMix64 of `base` mixed with `stream`: independent, reproducible
/// child seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoKd,
    Kd,
    SelfKd,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NoKd => "no_kd",
            Variant::Kd => "kd",
            Variant::SelfKd => "self_kd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub student: ArchSpec,
    pub teacher: ArchSpec,
    /// Student training; `seed` is the experiment seed.
    pub train: TrainConfig,
    /// Teacher training; its seed is derived per fold.
    pub teacher_train: TrainConfig,
    pub kd: KdConfig,
    pub variants: Vec<Variant>,
    pub quantize: bool,
    /// Training windows used to tune quantization scales; all of them when
    /// `None`.
    pub calibration_size: Option<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            student: ArchSpec::new(1, 8),
            teacher: ArchSpec::new(1, 32),
            train: TrainConfig::default(),
            teacher_train: TrainConfig::default(),
            kd: KdConfig::default(),
            variants: vec![Variant::NoKd],
            quantize: false,
            calibration_size: None,
        }
    }
}

/// Pooled results of one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub float: MetricsReport,
    pub quantized: Option<MetricsReport>,
    /// Chosen input scales per fold, in fold order.
    pub scales: Vec<InputScales>,
    pub folds: Vec<FoldPredictions>,
    pub quantized_folds: Vec<FoldPredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub seed: u64,
    pub animals: Vec<String>,
    pub config: CvConfig,
    pub teacher: Option<MetricsReport>,
    pub variants: BTreeMap<String, VariantReport>,
}

impl CvReport {
    pub fn mcc(&self, v: Variant) -> Option<f64> {
        self.variants.get(v.name()).map(|r| r.float.mcc_multiclass)
    }

    pub fn quantized_mcc(&self, v: Variant) -> Option<f64> {
        self.variants.get(v.name()).and_then(|r| r.quantized.as_ref()).map(|r| r.mcc_multiclass)
    }
}

struct VariantFold {
    float: FoldPredictions,
    quantized: Option<(FoldPredictions, InputScales)>,
}

struct FoldOutcome {
    teacher: Option<FoldPredictions>,
    variants: BTreeMap<Variant, VariantFold>,
}

fn predict_all(model: &dyn Teacher, ds: &Dataset, ids: &[u64]) -> Result<FoldPredictions> {
    let points = ds.select(ids)?;
    let mut preds = Vec::with_capacity(points.len());
    for p in &points {
        preds.push(crate::model::argmax(&model.logits(&p.samples)?));
    }
    Ok(FoldPredictions { ids: ids.to_vec(), labels: points.iter().map(|p| p.label).collect(), preds })
}

fn score_variant(model: &GruMlpModel, ds: &Dataset, fold: &Fold, cfg: &CvConfig, seed: u64) -> Result<VariantFold> {
    let float = predict_all(model, ds, &fold.val_ids)?;
    let quantized = if cfg.quantize {
        let mut calib_ids = fold.train_ids.clone();
        if let Some(k) = cfg.calibration_size {
            calib_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 7)));
            calib_ids.truncate(k.max(1));
            calib_ids.sort_unstable();
        }
        let calib: Vec<(&[f32], usize)> = ds.select(&calib_ids)?.into_iter().map(|p| (&p.samples[..], p.label)).collect();
        let tuned = tune_input_scales(model, &calib)?;
        let q = quantize_model(model, tuned.scales)?;
        Some((predict_all(&q, ds, &fold.val_ids)?, tuned.scales))
    } else {
        None
    };
    Ok(VariantFold { float, quantized })
}

fn run_fold(ds: &Dataset, fold: &Fold, index: usize, cfg: &CvConfig) -> Result<FoldOutcome> {
    let seed = derive_seed(cfg.train.seed, index as u64);
    let student_cfg = TrainConfig { seed, ..cfg.train };
    let want = |v: Variant| cfg.variants.contains(&v);
    let mut variants = BTreeMap::new();

    let mut teacher_preds = None;
    if want(Variant::Kd) {
        let tcfg = TrainConfig { seed: derive_seed(seed, 1), ..cfg.teacher_train };
        let teacher = train(ds, &fold.train_ids, &[], cfg.teacher, &tcfg, None)?.model;
        teacher_preds = Some(predict_all(&teacher, ds, &fold.val_ids)?);
        let soft = generate_soft_labels(&teacher, ds, &fold.train_ids)?;
        let kd = train(ds, &fold.train_ids, &[], cfg.student, &student_cfg, Some(Distill { config: cfg.kd, soft_labels: &soft }))?;
        variants.insert(Variant::Kd, score_variant(&kd.model, ds, fold, cfg, seed)?);
    }
    if want(Variant::NoKd) || want(Variant::SelfKd) {
        // the plain student doubles as the first self-distillation generation
        let plain = train(ds, &fold.train_ids, &[], cfg.student, &student_cfg, None)?.model;
        if want(Variant::NoKd) {
            variants.insert(Variant::NoKd, score_variant(&plain, ds, fold, cfg, seed)?);
        }
        if want(Variant::SelfKd) {
            let second = self_distill_from(ds, &fold.train_ids, &[], &plain, &student_cfg, cfg.kd)?.model;
            variants.insert(Variant::SelfKd, score_variant(&second, ds, fold, cfg, seed)?);
        }
    }
    Ok(FoldOutcome { teacher: teacher_preds, variants })
}

/// Runs leave-one-animal-out cross-validation. Folds may run in parallel;
/// results are merged in fold order, so the report depends only on the
/// inputs.
pub fn cross_validate(ds: &Dataset, cfg: &CvConfig) -> Result<CvReport> {
    if cfg.variants.is_empty() {
        return Err(Error::invalid("no model variants requested"));
    }
    cfg.kd.validate()?;
    let folds = loao_splits(ds)?;
    let outcomes: Vec<FoldOutcome> =
        folds.par_iter().enumerate().map(|(i, f)| run_fold(ds, f, i, cfg)).collect::<Result<Vec<_>>>()?;
    let names = ds.class_names();
    let c = ds.num_classes();
    let pool = |preds: Vec<FoldPredictions>| -> Result<MetricsReport> {
        MetricsReport::from_confusion(&aggregate_folds(&preds, c)?, names)
    };
    let teacher = if outcomes.iter().all(|o| o.teacher.is_some()) && !outcomes.is_empty() {
        Some(pool(outcomes.iter().map(|o| o.teacher.clone().expect("checked")).collect())?)
    } else {
        None
    };
    let mut variants = BTreeMap::new();
    let mut requested = cfg.variants.clone();
    requested.sort();
    requested.dedup();
    for v in requested {
        let float_folds: Vec<FoldPredictions> = outcomes.iter().map(|o| o.variants[&v].float.clone()).collect();
        let (q_folds, scales): (Vec<FoldPredictions>, Vec<InputScales>) =
            outcomes.iter().filter_map(|o| o.variants[&v].quantized.clone()).unzip();
        let quantized = if cfg.quantize { Some(pool(q_folds.clone())?) } else { None };
        variants.insert(
            v.name().to_string(),
            VariantReport { float: pool(float_folds.clone())?, quantized, scales, folds: float_folds, quantized_folds: q_folds },
        );
    }
    Ok(CvReport { seed: cfg.train.seed, animals: folds.into_iter().map(|f| f.animal).collect(), config: cfg.clone(), teacher, variants })
}

/// Scores a stored model on every datapoint of `ds`.
pub fn evaluate_model(model: &AnyModel, ds: &Dataset) -> Result<MetricsReport> {
    let a = model.arch();
    if a.num_classes() != ds.num_classes() || a.sequence_length() != ds.sequence_length() || a.input_dim() != ds.input_dim() {
        return Err(Error::DataContract(format!(
            "model expects {} classes and {}x{} windows, dataset has {} classes and {}x{}",
            a.num_classes(),
            a.sequence_length(),
            a.input_dim(),
            ds.num_classes(),
            ds.sequence_length(),
            ds.input_dim()
        )));
    }
    let preds = predict_all(model, ds, &ds.ids())?;
    MetricsReport::from_confusion(&aggregate_folds(&[preds], ds.num_classes())?, model.class_names())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gen, SynthConfig};

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let a: Vec<u64> = (0..8).map(|i| derive_seed(42, i)).collect();
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert_eq!(a, (0..8).map(|i| derive_seed(42, i)).collect::<Vec<_>>());
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn small_cv_runs_and_is_deterministic() {
        let ds = synth_gen(&SynthConfig { num_animals: 3, windows_per_animal: 12, sequence_length: 10, seed: 1 }).unwrap();
        let quick = TrainConfig { epochs: 2, batch_size: 8, seed: 5, ..Default::default() };
        let cfg = CvConfig {
            student: ArchSpec::new(1, 3),
            teacher: ArchSpec::new(1, 5),
            train: quick,
            teacher_train: quick,
            variants: vec![Variant::SelfKd, Variant::NoKd, Variant::Kd],
            quantize: true,
            calibration_size: Some(10),
            ..Default::default()
        };
        let a = cross_validate(&ds, &cfg).unwrap();
        let b = cross_validate(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.animals, vec!["A01", "A02", "A03"]);
        assert_eq!(a.variants.len(), 3);
        for v in a.variants.values() {
            assert_eq!(v.float.n, 36);
            assert_eq!(v.quantized.as_ref().unwrap().n, 36);
            assert_eq!(v.scales.len(), 3);
        }
        assert!(a.teacher.is_some());
    }

    #[test]
    fn evaluate_checks_shapes() {
        let ds = synth_gen(&SynthConfig { num_animals: 2, windows_per_animal: 4, sequence_length: 5, seed: 1 }).unwrap();
        let m = crate::model::GruMlp::<f32>::zeros(crate::Architecture::new(1, 2, 3, 6, 3).unwrap());
        assert!(evaluate_model(&AnyModel::Float(m), &ds).is_err());
        let mut ok = crate::model::GruMlp::<f32>::zeros(crate::Architecture::new(1, 2, 3, 5, 3).unwrap());
        ok.params.mlp.b2 = vec![0.0, 1.0, 0.0];
        let r = evaluate_model(&AnyModel::Float(ok), &ds).unwrap();
        assert_eq!(r.n, 8);
        assert_eq!(r.mcc_multiclass, 0.0);
    }
}
