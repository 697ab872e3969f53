//! Datasets of labeled accelerometer windows.
//!
//! On disk a dataset is JSON-lines, one datapoint per line:
//!
//! ```text
//! {"id":0,"animal":"A01","label":1,"samples":[[0.01,-0.02,0.98],...]}
//! ```
//!
//! The class count is not stored in the file; it is supplied when loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::default_class_names;
use crate::{Error, Result};

/// Floor applied to per-axis standard deviations before inversion.
pub const MIN_STD: f64 = 1e-6;

/// One labeled window of `N` consecutive multi-axis readings.
#[derive(Debug, Clone, PartialEq)]
pub struct Datapoint {
    pub id: u64,
    pub animal: String,
    pub label: usize,
    /// Row-major `N x input_dim`.
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    class_names: Vec<String>,
    sequence_length: usize,
    input_dim: usize,
    datapoints: Vec<Datapoint>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(
        num_classes: usize,
        class_names: Vec<String>,
        sequence_length: usize,
        input_dim: usize,
        datapoints: Vec<Datapoint>,
    ) -> Result<Self> {
        if num_classes == 0 || sequence_length == 0 || input_dim == 0 {
            return Err(Error::invalid("class count, sequence length and input dimension must be positive"));
        }
        if class_names.len() != num_classes {
            return Err(Error::invalid(format!(
                "{} class names given for {num_classes} classes",
                class_names.len()
            )));
        }
        let mut index = HashMap::with_capacity(datapoints.len());
        for (i, dp) in datapoints.iter().enumerate() {
            if dp.label >= num_classes {
                return Err(Error::DataContract(format!("datapoint {} has label {} >= {num_classes}", dp.id, dp.label)));
            }
            if dp.samples.len() != sequence_length * input_dim {
                return Err(Error::DataContract(format!("datapoint {} has the wrong number of samples", dp.id)));
            }
            if dp.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::DataContract(format!("datapoint {} has non-finite samples", dp.id)));
            }
            if index.insert(dp.id, i).is_some() {
                return Err(Error::DataContract(format!("duplicate datapoint id {}", dp.id)));
            }
        }
        Ok(Self { num_classes, class_names, sequence_length, input_dim, datapoints, index })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sequence_length(&self) -> usize {
        self.sequence_length
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn datapoints(&self) -> &[Datapoint] {
        &self.datapoints
    }

    pub fn len(&self) -> usize {
        self.datapoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datapoints.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Datapoint> {
        self.index.get(&id).map(|&i| &self.datapoints[i])
    }

    pub fn ids(&self) -> Vec<u64> {
        self.datapoints.iter().map(|d| d.id).collect()
    }

    /// Resolves ids to datapoints, failing on the first unknown id.
    pub fn select(&self, ids: &[u64]) -> Result<Vec<&Datapoint>> {
        ids.iter()
            .map(|id| self.get(*id).ok_or_else(|| Error::DataContract(format!("unknown datapoint id {id}"))))
            .collect()
    }

    /// Distinct animal ids in lexicographic order.
    pub fn animals(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.datapoints.iter().map(|d| d.animal.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for d in &self.datapoints {
            h[d.label] += 1;
        }
        h
    }
}

#[derive(Serialize, Deserialize)]
struct DatapointRecord {
    id: u64,
    animal: String,
    label: usize,
    samples: Vec<Vec<f32>>,
}

/// Parses a JSONL dataset. `num_classes` bounds the labels; class names
/// default to grazing/resting/alia for three classes.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file), num_classes)
}

pub fn parse_dataset(reader: impl BufRead, num_classes: usize) -> Result<Dataset> {
    if num_classes == 0 {
        return Err(Error::invalid("class count must be positive"));
    }
    let mut shape: Option<(usize, usize)> = None;
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: lineno, message };
        let rec: DatapointRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.label >= num_classes {
            return Err(err(format!("label {} out of range for {num_classes} classes", rec.label)));
        }
        if !seen.insert(rec.id) {
            return Err(err(format!("duplicate id {}", rec.id)));
        }
        let n = rec.samples.len();
        let d = rec.samples.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(err("empty samples".into()));
        }
        if rec.samples.iter().any(|s| s.len() != d) {
            return Err(err("samples have inconsistent axis counts".into()));
        }
        match shape {
            None => shape = Some((n, d)),
            Some((n0, d0)) if (n0, d0) != (n, d) => {
                return Err(err(format!("window is {n}x{d}, earlier windows are {n0}x{d0}")));
            }
            _ => {}
        }
        points.push(Datapoint {
            id: rec.id,
            animal: rec.animal,
            label: rec.label,
            samples: rec.samples.into_iter().flatten().collect(),
        });
    }
    let (n, d) = shape.ok_or_else(|| Error::DataContract("dataset file contains no datapoints".into()))?;
    Dataset::new(num_classes, default_class_names(num_classes), n, d, points)
}

/// Serializes to the canonical JSONL form (one line per datapoint, floats
/// in shortest round-trip notation).
pub fn dataset_to_jsonl(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for dp in &ds.datapoints {
        let rec = DatapointRecord {
            id: dp.id,
            animal: dp.animal.clone(),
            label: dp.label,
            samples: dp.samples.chunks(ds.input_dim).map(<[f32]>::to_vec).collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_jsonl(ds)?)?;
    Ok(())
}

/// Per-axis normalization constants: mean `m` and inverse standard
/// deviation `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Mean and `1 / max(std, 1e-6)` per axis over every sample of the given
/// datapoints (population standard deviation). The subset is treated as a
/// set, so the result does not depend on id order.
pub fn compute_norm_stats(ds: &Dataset, ids: &[u64]) -> Result<NormStats> {
    let mut sorted: Vec<u64> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::invalid("normalization statistics need a non-empty subset"));
    }
    let points = ds.select(&sorted)?;
    let d = ds.input_dim;
    let count = (points.len() * ds.sequence_length) as f64;
    let mut mean = vec![0.0f64; d];
    for p in &points {
        for row in p.samples.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; d];
    for p in &points {
        for row in p.samples.chunks_exact(d) {
            for ((acc, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v as f64 - m).powi(2);
            }
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        inv_std: var.iter().map(|&v| (1.0 / (v / count).sqrt().max(MIN_STD)) as f32).collect(),
    })
}

/// One leave-one-animal-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub animal: String,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

/// One fold per animal, in lexicographic animal order.
pub fn loao_splits(ds: &Dataset) -> Result<Vec<Fold>> {
    let mut by_animal: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for dp in &ds.datapoints {
        by_animal.entry(&dp.animal).or_default().push(dp.id);
    }
    if by_animal.len() < 2 {
        return Err(Error::DataContract(format!(
            "leave-one-animal-out needs at least 2 animals, dataset has {}",
            by_animal.len()
        )));
    }
    Ok(by_animal
        .iter()
        .map(|(animal, val)| Fold {
            animal: animal.to_string(),
            train_ids: ds.datapoints.iter().filter(|d| d.animal != *animal).map(|d| d.id).collect(),
            val_ids: val.clone(),
        })
        .collect())
}

/// Parameters of the synthetic three-class accelerometer generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_animals: usize,
    pub windows_per_animal: usize,
    pub sequence_length: usize,
    pub seed: u64,
}

/// Target class mix: grazing, resting, alia.
pub const SYNTH_CLASS_MIX: [f64; 3] = [0.50, 0.35, 0.15];

/// Fraction of windows that straddle a change of behaviour; they carry the
/// label of the behaviour occupying most of the window.
pub const SYNTH_TRANSITION_RATE: f64 = 0.15;

/// Per-animal nuisance parameters; these are what make held-out animals
/// harder than held-out windows.
struct AnimalStyle {
    gravity: [f64; 3],
    gain: f64,
    freq: f64,
    noise: f64,
}

impl AnimalStyle {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let gx = rng.random_range(-0.35..0.35);
        let gy = rng.random_range(-0.35..0.35);
        let norm = (gx * gx + gy * gy + 1.0f64).sqrt();
        Self {
            gravity: [gx / norm, gy / norm, 1.0 / norm],
            gain: rng.random_range(0.7..1.3),
            freq: rng.random_range(0.8..1.25),
            noise: rng.random_range(0.7..1.4),
        }
    }
}

/// Generates a seeded dataset standing in for collar accelerometry:
///
/// * class 0, grazing-like: tilted posture plus a large, slow, roughly
///   periodic head swing;
/// * class 1, resting-like: near-constant posture, small noise, sometimes a
///   faint fast rumination ripple;
/// * class 2, alia-like: resting-like baseline with walking-like bouts or
///   short bursts of vigorous movement, some of them weak enough to be
///   confused with resting.
///
/// Classes are mixed 50/35/15 per animal and animals differ in sensor
/// orientation, movement gain, tempo and noise level. Some windows straddle
/// a behaviour change, as with labels taken from video of continuous
/// recordings.
pub fn synth_gen(cfg: &SynthConfig) -> Result<Dataset> {
    let SynthConfig { num_animals, windows_per_animal, sequence_length: n, seed } = *cfg;
    if num_animals == 0 || windows_per_animal == 0 || n == 0 {
        return Err(Error::invalid("synthetic generator counts must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = num_animals.to_string().len().max(2);
    let mut points = Vec::with_capacity(num_animals * windows_per_animal);
    let mut next_id = 0u64;
    for a in 0..num_animals {
        let animal = format!("A{:0width$}", a + 1);
        let style = AnimalStyle::sample(&mut rng);
        let mut labels = class_quota(windows_per_animal);
        labels.shuffle(&mut rng);
        for label in labels {
            let mut samples = synth_window(label, n, &style, &mut rng);
            if n >= 4 && rng.random_bool(SYNTH_TRANSITION_RATE) {
                let other = (label + rng.random_range(1..3)) % 3;
                let tail = synth_window(other, n, &style, &mut rng);
                // the other behaviour takes over for under half the window
                let cut = rng.random_range(n / 2 + 1..n) * 3;
                samples[cut..].copy_from_slice(&tail[cut..]);
            }
            points.push(Datapoint { id: next_id, animal: animal.clone(), label, samples });
            next_id += 1;
        }
    }
    Dataset::new(3, default_class_names(3), n, 3, points)
}

fn class_quota(w: usize) -> Vec<usize> {
    let c0 = (SYNTH_CLASS_MIX[0] * w as f64).round() as usize;
    let c1 = ((SYNTH_CLASS_MIX[1] * w as f64).round() as usize).min(w - c0.min(w));
    let c0 = c0.min(w);
    let c2 = w - c0 - c1;
    let mut labels = vec![0; c0];
    labels.extend(std::iter::repeat_n(1, c1));
    labels.extend(std::iter::repeat_n(2, c2));
    labels
}

fn synth_window(label: usize, n: usize, st: &AnimalStyle, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = vec![[0.0f64; 3]; n];
    // small per-window posture change
    let tilt = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), 0.0];
    let base: [f64; 3] = std::array::from_fn(|k| st.gravity[k] + tilt[k]);
    let t_of = |i: usize| i as f64 / n as f64;
    match label {
        0 => {
            let amp = rng.random_range(0.25..0.6) * st.gain;
            let cycles = rng.random_range(1.5..4.0) * st.freq;
            let (p1, p2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            let noise = 0.06 * st.noise;
            for (i, s) in out.iter_mut().enumerate() {
                let ph = TAU * cycles * t_of(i);
                // head-down posture
                s[0] = base[0] + 0.3 + amp * (ph + p1).sin();
                s[1] = base[1] + 0.5 * amp * (ph + p2).sin();
                s[2] = base[2] - 0.15 + 0.3 * amp * (2.0 * ph).sin();
                for v in s.iter_mut() {
                    *v += noise * std_normal.sample(rng);
                }
            }
        }
        1 => {
            let noise = 0.02 * st.noise;
            let ripple = if rng.random_bool(0.5) { 0.04 * st.gain } else { 0.0 };
            let cycles = rng.random_range(6.0..10.0) * st.freq;
            let p = rng.random_range(0.0..TAU);
            for (i, s) in out.iter_mut().enumerate() {
                let r = ripple * (TAU * cycles * t_of(i) + p).sin();
                s[0] = base[0] + noise * std_normal.sample(rng);
                s[1] = base[1] + r + noise * std_normal.sample(rng);
                s[2] = base[2] + noise * std_normal.sample(rng);
            }
        }
        _ => {
            let noise = 0.03 * st.noise;
            for s in out.iter_mut() {
                for (v, b) in s.iter_mut().zip(base) {
                    *v = b + noise * std_normal.sample(rng);
                }
            }
            if rng.random_bool(0.5) {
                // walking-like bout: faster, moderate swing over part of the window
                let amp = rng.random_range(0.08..0.35) * st.gain;
                let cycles = rng.random_range(8.0..14.0) * st.freq;
                let p = rng.random_range(0.0..TAU);
                let start = rng.random_range(0..=n / 2);
                for (i, s) in out.iter_mut().enumerate().skip(start) {
                    let ph = TAU * cycles * t_of(i) + p;
                    s[0] += amp * ph.sin();
                    s[2] += 0.6 * amp * (ph + 1.0).sin();
                }
            } else {
                let bursts = rng.random_range(1..=3);
                for _ in 0..bursts {
                    let len = rng.random_range(4..=16).min(n);
                    let start = rng.random_range(0..=n - len);
                    let amp = rng.random_range(0.08..0.6) * st.gain;
                    for s in &mut out[start..start + len] {
                        for v in s.iter_mut() {
                            *v += amp * std_normal.sample(rng);
                        }
                    }
                }
            }
        }
    }
    out.into_iter().flat_map(|s| s.map(|v| v as f32)).collect()
}

/// Human-readable class histogram, e.g. `grazing=200 resting=140 alia=60`.
pub fn describe_histogram(ds: &Dataset) -> String {
    let mut s = String::new();
    for (name, count) in ds.class_names.iter().zip(ds.class_histogram()) {
        let _ = write!(s, "{}{name}={count}", if s.is_empty() { "" } else { " " });
    }
    s
}
