//! Losses, backpropagation through time and the training loop.
//!
//! The combined distillation loss for one datapoint is
//!
//! ```text
//! l = alpha * l_h + (1 - alpha) * t^2 * l_s
//! l_h = -log softmax(z)[c]
//! l_s = -sum_i softmax(v / t)_i * log softmax(z / t)_i
//! ```
//!
//! with student logits `z`, true class `c`, teacher logits `v` and
//! temperature `t`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{compute_norm_stats, Dataset};
use crate::distillation::SoftLabelSet;
use crate::metrics::{confusion, mcc_multiclass};
use crate::model::{ArchSpec, Gradients, GruMlp, GruMlpModel, Params, StepScratch};
use crate::{Activation, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { alpha: 0.1, temperature: 3.0 }
    }
}

impl KdConfig {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        let c = Self { alpha, temperature };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature >= 1.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be >= 1, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    SgdMomentum,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd-momentum" | "sgd" => Ok(Self::SgdMomentum),
            _ => Err(Error::invalid(format!("unknown optimizer {s:?}; expected adam or sgd-momentum"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 30, batch_size: 32, seed: 0, optimizer: Optimizer::Adam, clip_norm: 5.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("gradient clip norm must be positive"));
        }
        Ok(())
    }
}

fn log_sum_exp<T: Real>(z: &[T], inv_t: T) -> T {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) * inv_t;
    m + z.iter().map(|&v| (v * inv_t - m).exp()).sum::<T>().ln()
}

/// Temperature softmax `exp(z_i / t) / sum_j exp(z_j / t)`.
pub fn softmax_t<T: Real>(z: &[T], t: T) -> Vec<T> {
    let inv_t = T::one() / t;
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = z.iter().map(|&v| ((v - m) * inv_t).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn hard_loss<T: Real>(z: &[T], label: usize) -> Result<T> {
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    Ok(log_sum_exp(z, T::one()) - z[label])
}

pub fn soft_loss<T: Real>(z: &[T], teacher: &[T], t: T) -> Result<T> {
    if z.len() != teacher.len() {
        return Err(Error::shape(format!("{} student logits vs {} teacher logits", z.len(), teacher.len())));
    }
    let inv_t = T::one() / t;
    let lse = log_sum_exp(z, inv_t);
    let p = softmax_t(teacher, t);
    Ok(p.iter().zip(z).map(|(&pi, &zi)| pi * (lse - zi * inv_t)).sum())
}

/// The combined loss. `alpha = 1` reduces to [`hard_loss`] and ignores the
/// teacher entirely.
pub fn kd_loss<T: Real>(z: &[T], label: usize, teacher: &[T], cfg: &KdConfig) -> Result<T> {
    let lh = hard_loss(z, label)?;
    if cfg.alpha == 1.0 {
        return Ok(lh);
    }
    let t = T::lit(cfg.temperature);
    let ls = soft_loss(z, teacher, t)?;
    let a = T::lit(cfg.alpha);
    Ok(a * lh + (T::one() - a) * t * t * ls)
}

/// Loss of one datapoint and its gradient with respect to the logits.
fn loss_and_dlogits<T: Real>(z: &[T], label: usize, teacher: Option<&[T]>, kd: Option<&KdConfig>) -> Result<(T, Vec<T>)> {
    let lh = hard_loss(z, label)?;
    let mut g = softmax_t(z, T::one());
    g[label] = g[label] - T::one();
    let kd = match kd {
        Some(c) if c.alpha < 1.0 => c,
        _ => return Ok((lh, g)),
    };
    let teacher = teacher.ok_or_else(|| Error::invalid("distillation loss needs teacher logits"))?;
    let t = T::lit(kd.temperature);
    let a = T::lit(kd.alpha);
    let ls = soft_loss(z, teacher, t)?;
    let q = softmax_t(z, t);
    let p = softmax_t(teacher, t);
    // d(t^2 l_s)/dz = t (q - p)
    for ((gi, qi), pi) in g.iter_mut().zip(&q).zip(&p) {
        *gi = a * *gi + (T::one() - a) * t * (*qi - *pi);
    }
    Ok((a * lh + (T::one() - a) * t * t * ls, g))
}

/// One training datapoint as seen by [`backward`].
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    /// Raw, unnormalized `N x input_dim` window.
    pub window: &'a [T],
    pub label: usize,
    pub teacher: Option<&'a [T]>,
}

/// Activations of one GRU layer over a window, kept for the backward pass.
struct LayerTape<T> {
    /// Layer input per step, `N x in`.
    x: Vec<T>,
    /// Hidden states `h_0 .. h_N`, `(N + 1) x L`.
    h: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

impl<T: Real> LayerTape<T> {
    fn new(steps: usize, input: usize, hidden: usize) -> Self {
        let zl = vec![T::zero(); steps * hidden];
        Self { x: vec![T::zero(); steps * input], h: vec![T::zero(); (steps + 1) * hidden], r: zl.clone(), z: zl.clone(), n: zl.clone(), hn: zl }
    }
}

struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    pre1: Vec<T>,
    a1: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> Tape<T> {
    fn new(model: &GruMlp<T>) -> Self {
        let a = &model.arch;
        let n = a.sequence_length();
        Self {
            layers: (0..a.num_gru_layers()).map(|k| LayerTape::new(n, a.layer_input_dim(k), a.hidden_size())).collect(),
            pre1: vec![T::zero(); a.mlp_hidden()],
            a1: vec![T::zero(); a.mlp_hidden()],
            logits: vec![T::zero(); a.num_classes()],
        }
    }
}

fn forward_tape<T: Real>(model: &GruMlp<T>, window: &[T], tape: &mut Tape<T>) -> Result<()> {
    let a = model.arch;
    let (n, d, l) = (a.sequence_length(), a.input_dim(), a.hidden_size());
    if window.len() != n * d {
        return Err(Error::shape(format!("window has {} values, expected {}", window.len(), n * d)));
    }
    let mut s = StepScratch::new(l);
    let mut next = vec![T::zero(); l];
    for (k, layer) in model.params.layers.iter().enumerate() {
        let (below, rest) = tape.layers.split_at_mut(k);
        let tp = &mut rest[0];
        let din = layer.input_size();
        for t in 0..n {
            let x = &mut tp.x[t * din..(t + 1) * din];
            if k == 0 {
                model.normalize(&window[t * d..(t + 1) * d], x);
            } else {
                x.copy_from_slice(&below[k - 1].h[(t + 1) * l..(t + 2) * l]);
            }
            layer.step(&tp.x[t * din..(t + 1) * din], &tp.h[t * l..(t + 1) * l], Activation::Exact, &mut s, &mut next);
            tp.h[(t + 1) * l..(t + 2) * l].copy_from_slice(&next);
            tp.r[t * l..(t + 1) * l].copy_from_slice(&s.r);
            tp.z[t * l..(t + 1) * l].copy_from_slice(&s.z);
            tp.n[t * l..(t + 1) * l].copy_from_slice(&s.n);
            tp.hn[t * l..(t + 1) * l].copy_from_slice(&s.hn);
        }
    }
    let top = &tape.layers.last().expect("at least one layer").h[n * l..];
    let mlp = &model.params.mlp;
    mlp.w1.matvec_into(top, &mut tape.pre1);
    for ((p, a1), &b) in tape.pre1.iter_mut().zip(tape.a1.iter_mut()).zip(&mlp.b1) {
        *p = *p + b;
        *a1 = p.max(T::zero());
    }
    mlp.w2.matvec_into(&tape.a1, &mut tape.logits);
    for (v, &b) in tape.logits.iter_mut().zip(&mlp.b2) {
        *v = *v + b;
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// Backpropagates `dlogits` through the tape, accumulating into `grads`.
fn backward_tape<T: Real>(model: &GruMlp<T>, tape: &Tape<T>, dlogits: &[T], grads: &mut Gradients<T>) {
    let a = model.arch;
    let (n, l) = (a.sequence_length(), a.hidden_size());
    let mlp = &model.params.mlp;
    let top = &tape.layers.last().expect("at least one layer").h[n * l..];

    let g = &mut grads.mlp;
    g.w2.outer_acc(dlogits, &tape.a1);
    add_into(&mut g.b2, dlogits);
    let mut da1 = vec![T::zero(); a.mlp_hidden()];
    mlp.w2.matvec_t_acc(dlogits, &mut da1);
    for (d, &p) in da1.iter_mut().zip(&tape.pre1) {
        if p <= T::zero() {
            *d = T::zero();
        }
    }
    g.w1.outer_acc(&da1, top);
    add_into(&mut g.b1, &da1);

    // gradient arriving at each h_t (t = 1..N) from above, per step
    let mut dh_ext = vec![T::zero(); n * l];
    mlp.w1.matvec_t_acc(&da1, &mut dh_ext[(n - 1) * l..]);

    let mut dh = vec![T::zero(); l];
    let mut dh_prev = vec![T::zero(); l];
    let (mut dpre_n, mut dhn, mut dpre_r, mut dpre_z) = (vec![T::zero(); l], vec![T::zero(); l], vec![T::zero(); l], vec![T::zero(); l]);
    for k in (0..a.num_gru_layers()).rev() {
        let layer = &model.params.layers[k];
        let gl = &mut grads.layers[k];
        let tp = &tape.layers[k];
        let din = layer.input_size();
        let mut dx_all = if k > 0 { vec![T::zero(); n * din] } else { Vec::new() };
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..n).rev() {
            add_into(&mut dh, &dh_ext[t * l..(t + 1) * l]);
            let x = &tp.x[t * din..(t + 1) * din];
            let hp = &tp.h[t * l..(t + 1) * l];
            let (r, z, nn, hn) = (&tp.r[t * l..(t + 1) * l], &tp.z[t * l..(t + 1) * l], &tp.n[t * l..(t + 1) * l], &tp.hn[t * l..(t + 1) * l]);
            for i in 0..l {
                let dn = dh[i] * (T::one() - z[i]);
                let dz = dh[i] * (hp[i] - nn[i]);
                dh_prev[i] = dh[i] * z[i];
                dpre_n[i] = dn * (T::one() - nn[i] * nn[i]);
                dhn[i] = dpre_n[i] * r[i];
                dpre_r[i] = dpre_n[i] * hn[i] * r[i] * (T::one() - r[i]);
                dpre_z[i] = dz * z[i] * (T::one() - z[i]);
            }
            gl.w_an.outer_acc(&dpre_n, x);
            add_into(&mut gl.b_an, &dpre_n);
            gl.w_hn.outer_acc(&dhn, hp);
            add_into(&mut gl.b_hn, &dhn);
            gl.w_ar.outer_acc(&dpre_r, x);
            add_into(&mut gl.b_ar, &dpre_r);
            gl.w_hr.outer_acc(&dpre_r, hp);
            add_into(&mut gl.b_hr, &dpre_r);
            gl.w_az.outer_acc(&dpre_z, x);
            add_into(&mut gl.b_az, &dpre_z);
            gl.w_hz.outer_acc(&dpre_z, hp);
            add_into(&mut gl.b_hz, &dpre_z);

            layer.w_hn.matvec_t_acc(&dhn, &mut dh_prev);
            layer.w_hr.matvec_t_acc(&dpre_r, &mut dh_prev);
            layer.w_hz.matvec_t_acc(&dpre_z, &mut dh_prev);
            if k > 0 {
                let dx = &mut dx_all[t * din..(t + 1) * din];
                layer.w_an.matvec_t_acc(&dpre_n, dx);
                layer.w_ar.matvec_t_acc(&dpre_r, dx);
                layer.w_az.matvec_t_acc(&dpre_z, dx);
            }
            std::mem::swap(&mut dh, &mut dh_prev);
        }
        if k > 0 {
            dh_ext = dx_all;
        }
    }
}

/// Gradients of the mean loss over `batch` and the mean loss itself.
///
/// With `kd = None` (or `alpha = 1`) the loss is the hard cross entropy and
/// teacher logits are ignored. Normalization constants are frozen and get no
/// gradient.
pub fn backward<T: Real>(model: &GruMlp<T>, batch: &[Example<'_, T>], kd: Option<&KdConfig>) -> Result<(Gradients<T>, T)> {
    let mut grads = Params::zeros(&model.arch);
    let loss = accumulate(model, batch, kd, &mut Tape::new(model), &mut grads)?;
    Ok((grads, loss))
}

fn accumulate<T: Real>(
    model: &GruMlp<T>,
    batch: &[Example<'_, T>],
    kd: Option<&KdConfig>,
    tape: &mut Tape<T>,
    grads: &mut Gradients<T>,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = T::zero();
    for ex in batch {
        forward_tape(model, ex.window, tape)?;
        let (loss, mut dl) = loss_and_dlogits(&tape.logits, ex.label, ex.teacher, kd)?;
        if !loss.is_finite() {
            let max_logit = tape.logits.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            return Err(Error::Training(format!("non-finite loss {loss} (label {}, max |logit| {max_logit})", ex.label)));
        }
        dl.iter_mut().for_each(|v| *v = *v * scale);
        backward_tape(model, tape, &dl, grads);
        total = total + loss;
    }
    Ok(total * scale)
}

/// Mean loss over `batch` without gradients (the finite-difference oracle
/// evaluates this).
pub fn batch_loss<T: Real>(model: &GruMlp<T>, batch: &[Example<'_, T>], kd: Option<&KdConfig>) -> Result<T> {
    let mut total = T::zero();
    for ex in batch {
        let z = model.forward(ex.window)?;
        total = total + loss_and_dlogits(&z, ex.label, ex.teacher, kd)?.0;
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads.tensors().iter().flat_map(|t| t.iter()).map(|v| v.to_f64_lossless().powi(2)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

struct OptState {
    kind: Optimizer,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptState {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;
    const MOMENTUM: f32 = 0.9;

    fn new(kind: Optimizer, lr: f64, params: &Params<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { kind, lr: lr as f32, step: 0, m: zeros.clone(), v: zeros }
    }

    fn apply(&mut self, params: &mut Params<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            match self.kind {
                Optimizer::Adam => {
                    for i in 0..p.len() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                    }
                }
                Optimizer::SgdMomentum => {
                    for i in 0..p.len() {
                        m[i] = Self::MOMENTUM * m[i] + g[i];
                        p[i] -= self.lr * m[i];
                    }
                }
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mcc: Option<f64>,
    pub wall_ms: u64,
}

/// Distillation targets for [`train`].
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    pub config: KdConfig,
    pub soft_labels: &'a SoftLabelSet,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GruMlpModel,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model of shape `spec` on `train_ids`.
///
/// Normalization statistics come from the training ids. If `val_ids` is
/// non-empty the validation MCC is logged after every epoch. With `kd`
/// given, every training id must have soft labels.
pub fn train(
    ds: &Dataset,
    train_ids: &[u64],
    val_ids: &[u64],
    spec: ArchSpec,
    cfg: &TrainConfig,
    kd: Option<Distill<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let arch = spec.build(ds.num_classes(), ds.sequence_length(), ds.input_dim())?;
    let stats = compute_norm_stats(ds, train_ids)?;
    let mut model = GruMlp::<f32>::init(arch, cfg.seed).with_norm(&stats.mean, &stats.inv_std)?;
    model.class_names = ds.class_names().to_vec();

    let points = ds.select(train_ids)?;
    let val = ds.select(val_ids)?;
    let teacher: Vec<Option<&[f32]>> = match &kd {
        None => vec![None; points.len()],
        Some(d) => {
            d.config.validate()?;
            if d.soft_labels.num_classes() != ds.num_classes() {
                return Err(Error::DataContract(format!(
                    "soft labels have {} classes, dataset has {}",
                    d.soft_labels.num_classes(),
                    ds.num_classes()
                )));
            }
            let missing = d.soft_labels.missing(train_ids);
            if !missing.is_empty() {
                return Err(Error::Coverage { missing });
            }
            points.iter().map(|p| d.soft_labels.get(p.id)).collect()
        }
    };
    let kd_cfg = kd.map(|d| d.config);

    model.metadata.insert("arch".into(), spec.to_string());
    model.metadata.insert("seed".into(), cfg.seed.to_string());
    model.metadata.insert("epochs".into(), cfg.epochs.to_string());
    model.metadata.insert("training".into(), if kd.is_some() { "kd" } else { "plain" }.into());
    if let Some(k) = kd_cfg {
        model.metadata.insert("alpha".into(), k.alpha.to_string());
        model.metadata.insert("temperature".into(), k.temperature.to_string());
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut opt = OptState::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut tape = Tape::new(&model);
    let mut grads = Params::zeros(&arch);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example<'_, f32>> = chunk
                .iter()
                .map(|&i| Example { window: &points[i].samples, label: points[i].label, teacher: teacher[i] })
                .collect();
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            let loss = accumulate(&model, &batch, kd_cfg.as_ref(), &mut tape, &mut grads)
                .map_err(|e| match e {
                    Error::Training(m) => Error::Training(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.apply(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}, batch {b}: parameters became non-finite")));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let val_mcc = if val.is_empty() { None } else { Some(score(&model, &val)?) };
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / points.len() as f64,
            val_mcc,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome { model, log })
}

fn score(model: &GruMlpModel, points: &[&crate::data::Datapoint]) -> Result<f64> {
    let preds = points.iter().map(|p| model.predict(&p.samples)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = points.iter().map(|p| p.label).collect();
    mcc_multiclass(&confusion(&preds, &labels, model.arch.num_classes())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Datapoint, SynthConfig};
    use crate::model::Architecture;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        for t in [1.0, 3.0, 100.0] {
            for v in softmax_t(&[0.0f64, 0.0, 0.0], t) {
                assert!(close(v, 1.0 / 3.0, 1e-15));
            }
        }
        let q = softmax_t(&[2f64.ln(), 0.0, 0.0], 1.0);
        assert!(close(q[0], 0.5, 1e-15) && close(q[1], 0.25, 1e-15) && close(q[2], 0.25, 1e-15));
        for v in softmax_t(&[1.0f64, 2.0, 3.0], 1000.0) {
            assert!(close(v, 1.0 / 3.0, 1e-3));
        }
        let big = softmax_t(&[1000.0f32, 0.0], 1.0);
        assert_eq!(big, vec![1.0, 0.0]);
    }

    #[test]
    fn hard_loss_examples() {
        assert!(close(hard_loss(&[0.0f64; 3], 0).unwrap(), 3f64.ln(), 1e-15));
        assert!(hard_loss(&[50.0f64, 0.0, 0.0], 0).unwrap() < 1e-20);
        assert!(hard_loss(&[0.0f64; 3], 3).is_err());
    }

    #[test]
    fn soft_loss_examples() {
        assert!(close(soft_loss(&[0.0f64; 3], &[0.0; 3], 3.0).unwrap(), 3f64.ln(), 1e-15));
        assert!(close(soft_loss(&[0.0f64; 3], &[2.0, 0.0, 0.0], 2.0).unwrap(), 3f64.ln(), 1e-15));
        assert!(soft_loss(&[0.0f64; 3], &[0.0; 2], 1.0).is_err());
        // teacher == student gives the entropy of p
        let z = [0.3f64, -1.2, 2.0];
        let p = softmax_t(&z, 2.0);
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!(close(soft_loss(&z, &z, 2.0).unwrap(), h, 1e-12));
    }

    #[test]
    fn kd_loss_examples() {
        let z = [0.5f64, -0.1, 1.3];
        let v = [2.0f64, 0.0, -1.0];
        let one = KdConfig::new(1.0, 3.0).unwrap();
        assert_eq!(kd_loss(&z, 2, &v, &one).unwrap(), hard_loss(&z, 2).unwrap());
        let zero = KdConfig::new(0.0, 1.0).unwrap();
        assert_eq!(kd_loss(&z, 2, &v, &zero).unwrap(), soft_loss(&z, &v, 1.0).unwrap());
        // 0.1 * l_h + 0.9 * 9 * l_s with l_h = 1, l_s = 0.5
        let (a, t, lh, ls) = (0.1f64, 3.0f64, 1.0f64, 0.5f64);
        assert!(close(a * lh + (1.0 - a) * t * t * ls, 4.15, 1e-12));
        assert!(KdConfig::new(1.5, 3.0).is_err());
        assert!(KdConfig::new(0.5, 0.5).is_err());
        assert_eq!(KdConfig::default(), KdConfig { alpha: 0.1, temperature: 3.0 });
    }

    fn grad_model(seed: u64) -> (GruMlp<f64>, Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
        let a = Architecture::new(1, 4, 3, 8, 3).unwrap();
        let mut m = GruMlp::<f64>::init(a, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for t in m.params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let windows = (0..4).map(|_| (0..24).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let labels = vec![0, 1, 2, 1];
        let teachers = (0..4).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        (m, windows, labels, teachers)
    }

    /// Largest relative deviation between analytic and central-difference
    /// gradients over every parameter.
    fn max_fd_error(kd: Option<KdConfig>) -> f64 {
        let (mut m, windows, labels, teachers) = grad_model(5);
        let batch: Vec<Example<'_, f64>> = windows
            .iter()
            .zip(&labels)
            .zip(&teachers)
            .map(|((w, &l), t)| Example { window: w, label: l, teacher: Some(t) })
            .collect();
        let (g, _) = backward(&m, &batch, kd.as_ref()).unwrap();
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.to_vec()).collect();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        let mut idx = 0;
        for ti in 0..m.params.tensors().len() {
            for j in 0..m.params.tensors()[ti].len() {
                let orig = m.params.tensors()[ti][j];
                m.params.tensors_mut()[ti][j] = orig + eps;
                let lp = batch_loss(&m, &batch, kd.as_ref()).unwrap();
                m.params.tensors_mut()[ti][j] = orig - eps;
                let lm = batch_loss(&m, &batch, kd.as_ref()).unwrap();
                m.params.tensors_mut()[ti][j] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(max_fd_error(None) <= 1e-3);
        assert!(max_fd_error(Some(KdConfig::new(0.0, 2.0).unwrap())) <= 1e-3);
        assert!(max_fd_error(Some(KdConfig::default())) <= 1e-3);
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let a = Architecture::new(2, 3, 3, 5, 2).unwrap();
        let mut m = GruMlp::<f64>::init(a, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for t in m.params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let teacher = [1.0, -0.5, 0.2];
        let batch = [Example { window: &w[..], label: 2, teacher: Some(&teacher[..]) }];
        let kd = KdConfig::new(0.3, 2.0).unwrap();
        let (g, _) = backward(&m, &batch, Some(&kd)).unwrap();
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.to_vec()).collect();
        let mut idx = 0;
        for ti in 0..m.params.tensors().len() {
            for j in 0..m.params.tensors()[ti].len() {
                let orig = m.params.tensors()[ti][j];
                m.params.tensors_mut()[ti][j] = orig + 1e-5;
                let lp = batch_loss(&m, &batch, Some(&kd)).unwrap();
                m.params.tensors_mut()[ti][j] = orig - 1e-5;
                let lm = batch_loss(&m, &batch, Some(&kd)).unwrap();
                m.params.tensors_mut()[ti][j] = orig;
                let fd = (lp - lm) / 2e-5;
                let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "tensor {ti} entry {j}: {} vs {fd}", analytic[idx]);
                idx += 1;
            }
        }
    }

    #[test]
    fn zero_model_head_gradient() {
        let a = Architecture::new(1, 4, 3, 6, 3).unwrap();
        let mut m = GruMlp::<f64>::zeros(a);
        m.params.mlp.b2 = vec![0.2, -0.1, 0.4];
        let w = vec![0.3; 18];
        let labels = [0usize, 1, 1, 2];
        let batch: Vec<_> = labels.iter().map(|&l| Example { window: &w[..], label: l, teacher: None }).collect();
        let (g, _) = backward(&m, &batch, None).unwrap();
        let q = softmax_t(&m.params.mlp.b2, 1.0);
        let empirical = [0.25, 0.5, 0.25];
        for k in 0..3 {
            assert!(close(g.mlp.b2[k], q[k] - empirical[k], 1e-12));
        }
    }

    #[test]
    fn alpha_one_ignores_teacher() {
        let (m, windows, labels, teachers) = grad_model(2);
        let kd = KdConfig::new(1.0, 3.0).unwrap();
        let other: Vec<Vec<f64>> = teachers.iter().map(|t| t.iter().map(|v| -v * 7.0).collect()).collect();
        let mk = |ts: &'_ [Vec<f64>]| -> Vec<f64> {
            let batch: Vec<_> = windows
                .iter()
                .zip(&labels)
                .zip(ts)
                .map(|((w, &l), t)| Example { window: &w[..], label: l, teacher: Some(&t[..]) })
                .collect();
            let (g, _) = backward(&m, &batch, Some(&kd)).unwrap();
            g.tensors().iter().flat_map(|t| t.to_vec()).collect()
        };
        let a = mk(&teachers);
        let b = mk(&other);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Constant windows (class 0) against fast alternating ones (class 1).
    fn toy() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = (0..40u64)
            .map(|id| {
                let label = (id % 2) as usize;
                let samples = (0..16)
                    .flat_map(|t| {
                        let base = if label == 0 { 0.5 } else if t % 2 == 0 { 1.0 } else { -1.0 };
                        [base + rng.random_range(-0.1..0.1), rng.random_range(-0.1f32..0.1)]
                    })
                    .collect();
                Datapoint { id, animal: format!("a{}", id % 4), label, samples }
            })
            .collect();
        Dataset::new(2, vec!["still".into(), "moving".into()], 16, 2, points).unwrap()
    }

    #[test]
    fn separable_toy_is_learned() {
        let ds = toy();
        let ids = ds.ids();
        let cfg = TrainConfig { epochs: 20, batch_size: 8, learning_rate: 1e-2, seed: 3, ..Default::default() };
        let out = train(&ds, &ids, &ids, ArchSpec::new(1, 4), &cfg, None).unwrap();
        assert_eq!(out.log.len(), 20);
        assert!(out.log[19].mean_loss < out.log[0].mean_loss);
        assert!(out.log[19].val_mcc.unwrap() >= 0.95, "{:?}", out.log.last());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = toy();
        let ids = ds.ids();
        let cfg = TrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let out = train(&ds, &ids, &[], ArchSpec::new(1, 4), &cfg, None).unwrap();
        let init = GruMlp::<f32>::init(out.model.arch, 11);
        assert_eq!(out.model.params, init.params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = crate::data::synth_gen(&SynthConfig { num_animals: 2, windows_per_animal: 12, sequence_length: 10, seed: 4 }).unwrap();
        let ids = ds.ids();
        let cfg = TrainConfig { epochs: 3, batch_size: 5, seed: 8, ..Default::default() };
        let a = train(&ds, &ids, &[], ArchSpec::new(2, 4), &cfg, None).unwrap().model;
        let b = train(&ds, &ids, &[], ArchSpec::new(2, 4), &cfg, None).unwrap().model;
        assert_eq!(a, b);
        let sgd = TrainConfig { optimizer: Optimizer::SgdMomentum, ..cfg };
        let c = train(&ds, &ids, &[], ArchSpec::new(2, 4), &sgd, None).unwrap().model;
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, windows, labels, _) = grad_model(1);
        m.params.mlp.b2[0] = f64::INFINITY;
        let batch = [Example { window: &windows[0][..], label: labels[0], teacher: None }];
        assert!(matches!(backward(&m, &batch, None), Err(Error::Training(_))));
    }

    #[test]
    fn clip_bounds_norm() {
        let a = Architecture::new(1, 2, 2, 2, 1).unwrap();
        let mut g = Params::<f64>::zeros(&a);
        g.mlp.b2 = vec![30.0, 40.0];
        assert_eq!(clip_global_norm(&mut g, 5.0), 50.0);
        assert!(close(g.mlp.b2[0], 3.0, 1e-12) && close(g.mlp.b2[1], 4.0, 1e-12));
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert!(close(g.mlp.b2[1], 4.0, 1e-12));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..6), t in 1.0f64..10.0, c in -50.0f64..50.0) {
            let q = softmax_t(&z, t);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in q.iter().zip(softmax_t(&shifted, t)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let lh = hard_loss(&z, 0).unwrap();
            prop_assert!(lh >= 0.0);
            prop_assert!((lh - hard_loss(&shifted, 0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn entropy_grows_with_temperature(z in prop::collection::vec(-10.0f64..10.0, 2..6)) {
            let entropy = |t: f64| -> f64 { softmax_t(&z, t).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum() };
            let mut prev = entropy(1.0);
            for k in 1..40 {
                let e = entropy(1.0 + 0.25 * k as f64);
                prop_assert!(e >= prev - 1e-12);
                prev = e;
            }
        }

        #[test]
        fn kd_endpoints_are_exact(z in prop::collection::vec(-5.0f64..5.0, 3), v in prop::collection::vec(-5.0f64..5.0, 3), c in 0usize..3) {
            prop_assert_eq!(kd_loss(&z, c, &v, &KdConfig { alpha: 1.0, temperature: 3.0 }).unwrap(), hard_loss(&z, c).unwrap());
            prop_assert_eq!(kd_loss(&z, c, &v, &KdConfig { alpha: 0.0, temperature: 1.0 }).unwrap(), soft_loss(&z, &v, 1.0).unwrap());
        }
    }
}
