//! Teachers, soft labels and the two-step distillation procedure.
//!
//! Soft labels are stored as raw teacher logits; the temperature is applied
//! at training time. On disk they are CSV:
//!
//! ```text
//! id,logit_0,logit_1,logit_2
//! 0,1.25,-0.5,0.125
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::model::{ArchSpec, GruMlpModel};
use crate::qmodel::{AnyModel, QuantizedGruMlpModel};
use crate::training::{train, Distill, KdConfig, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Anything that maps a raw window to `C` logits.
pub trait Teacher: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, window: &[f32]) -> Result<Vec<f32>>;
    fn describe(&self) -> String;
}

impl Teacher for GruMlpModel {
    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn logits(&self, window: &[f32]) -> Result<Vec<f32>> {
        self.forward(window)
    }

    fn describe(&self) -> String {
        let tag = self.metadata.get("training").map(String::as_str).unwrap_or("unknown");
        format!("{}-mlp float ({tag})", self.arch.spec())
    }
}

impl Teacher for QuantizedGruMlpModel {
    fn num_classes(&self) -> usize {
        self.arch().num_classes()
    }

    fn logits(&self, window: &[f32]) -> Result<Vec<f32>> {
        self.q_forward(window)
    }

    fn describe(&self) -> String {
        format!("{}-mlp q7", self.arch().spec())
    }
}

impl Teacher for AnyModel {
    fn num_classes(&self) -> usize {
        self.arch().num_classes()
    }

    fn logits(&self, window: &[f32]) -> Result<Vec<f32>> {
        AnyModel::logits(self, window)
    }

    fn describe(&self) -> String {
        match self {
            AnyModel::Float(m) => m.describe(),
            AnyModel::Quantized(q) => q.describe(),
        }
    }
}

/// Teacher logits keyed by datapoint id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    num_classes: usize,
    records: BTreeMap<u64, Vec<f32>>,
    pub provenance: String,
}

impl SoftLabelSet {
    pub fn new(num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("soft labels need at least one class"));
        }
        Ok(Self { num_classes, records: BTreeMap::new(), provenance: provenance.into() })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, id: u64, logits: Vec<f32>) -> Result<()> {
        if logits.len() != self.num_classes {
            return Err(Error::shape(format!("id {id}: {} logits for {} classes", logits.len(), self.num_classes)));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("id {id}: non-finite logit")));
        }
        self.records.insert(id, logits);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.records.get(&id).map(Vec::as_slice)
    }

    pub fn records(&self) -> &BTreeMap<u64, Vec<f32>> {
        &self.records
    }

    /// Ids from `ids` with no record, in the given order.
    pub fn missing(&self, ids: &[u64]) -> Vec<u64> {
        ids.iter().copied().filter(|id| !self.records.contains_key(id)).collect()
    }

    /// Fails unless every id in `ds` that this set references exists there.
    pub fn check_ids(&self, ds: &Dataset) -> Result<()> {
        match self.records.keys().find(|id| ds.get(**id).is_none()) {
            Some(id) => Err(Error::DataContract(format!("soft label id {id} is not in the dataset"))),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id");
        for k in 0..self.num_classes {
            let _ = write!(s, ",logit_{k}");
        }
        s.push('\n');
        for (id, logits) in &self.records {
            let _ = write!(s, "{id}");
            for v in logits {
                // Display prints the shortest string that parses back to
                // the same f32
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, provenance: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "empty soft-label file".into() })?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let c = cols.len().saturating_sub(1);
        let expected: Vec<String> = std::iter::once("id".to_string()).chain((0..c).map(|k| format!("logit_{k}"))).collect();
        if c == 0 || cols != expected {
            return Err(Error::Parse { line: 1, message: format!("bad header {header:?}; expected id,logit_0,...") });
        }
        let mut set = Self::new(c, provenance)?;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: lineno, message };
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != c + 1 {
                return Err(err(format!("{} fields, expected {}", fields.len(), c + 1)));
            }
            let id: u64 = fields[0].parse().map_err(|_| err(format!("bad id {:?}", fields[0])))?;
            let logits = fields[1..]
                .iter()
                .map(|f| f.parse::<f32>().map_err(|_| err(format!("bad logit {f:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if set.records.contains_key(&id) {
                return Err(err(format!("duplicate id {id}")));
            }
            set.insert(id, logits).map_err(|e| err(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&std::fs::read_to_string(path)?, format!("file:{}", path.display()))
    }
}

/// Runs `teacher` over the datapoints `ids` of `ds`.
pub fn generate_soft_labels(teacher: &dyn Teacher, ds: &Dataset, ids: &[u64]) -> Result<SoftLabelSet> {
    if teacher.num_classes() != ds.num_classes() {
        return Err(Error::DataContract(format!(
            "teacher has {} classes, dataset has {}",
            teacher.num_classes(),
            ds.num_classes()
        )));
    }
    let mut set = SoftLabelSet::new(ds.num_classes(), teacher.describe())?;
    for p in ds.select(ids)? {
        set.insert(p.id, teacher.logits(&p.samples)?)?;
    }
    Ok(set)
}

/// Trains a student on hard labels and the given soft labels. The soft
/// labels must cover every training id.
pub fn distill(
    ds: &Dataset,
    train_ids: &[u64],
    val_ids: &[u64],
    student: ArchSpec,
    cfg: &TrainConfig,
    kd: KdConfig,
    soft_labels: &SoftLabelSet,
) -> Result<TrainOutcome> {
    let missing = soft_labels.missing(train_ids);
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let mut out = train(ds, train_ids, val_ids, student, cfg, Some(Distill { config: kd, soft_labels }))?;
    out.model.metadata.insert("teacher".into(), soft_labels.provenance.clone());
    Ok(out)
}

/// Seed of the second self-distillation generation.
pub fn second_generation_seed(seed: u64) -> u64 {
    crate::evaluation::derive_seed(seed, 0x5e1f)
}

#[derive(Debug, Clone)]
pub struct SelfDistillOutcome {
    pub first: TrainOutcome,
    pub second: TrainOutcome,
}

/// Trains a plain first generation with `cfg.seed`, then distills a fresh
/// model of the same shape from it, seeded with
/// [`second_generation_seed`].
pub fn self_distill(
    ds: &Dataset,
    train_ids: &[u64],
    val_ids: &[u64],
    arch: ArchSpec,
    cfg: &TrainConfig,
    kd: KdConfig,
) -> Result<SelfDistillOutcome> {
    let first = train(ds, train_ids, val_ids, arch, cfg, None)?;
    let second = self_distill_from(ds, train_ids, val_ids, &first.model, cfg, kd)?;
    Ok(SelfDistillOutcome { first, second })
}

/// The second half of [`self_distill`], for callers that already hold the
/// first-generation model.
pub fn self_distill_from(
    ds: &Dataset,
    train_ids: &[u64],
    val_ids: &[u64],
    first: &GruMlpModel,
    cfg: &TrainConfig,
    kd: KdConfig,
) -> Result<TrainOutcome> {
    let soft = generate_soft_labels(first, ds, train_ids)?;
    let cfg2 = TrainConfig { seed: second_generation_seed(cfg.seed), ..*cfg };
    let mut out = distill(ds, train_ids, val_ids, first.arch.spec(), &cfg2, kd, &soft)?;
    out.model.metadata.insert("training".into(), "self-kd".into());
    Ok(out)
}
