//! Dynamically quantized GRU-MLP.
//!
//! Weights are stored as per-tensor Q7 matrices; biases, normalization and
//! all element-wise arithmetic stay in float. Each matrix-vector product
//! quantizes its input with a power-of-two scale, runs the integer kernel
//! and rescales the result:
//!
//! ```text
//! y = rescale(q7_matvec(W_Q, to_q7(x, s_in)), 128 * s_in * s_W) + b
//! ```
//!
//! The first GRU layer's input uses `s_a`, every hidden-state input (and the
//! input of a second GRU layer) uses `s_h`, and the ReLU output feeding the
//! last MLP matrix uses `s_m`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fxp::{is_power_of_two, q7_matvec_into, quantize_matrix, rescale_factor, rescale_into, to_q7_into, Q7Matrix};
use crate::metrics::{confusion, mcc_multiclass};
use crate::model::io::{decode_f32, encode_f32};
use crate::model::{argmax, Architecture, GruMlp, GruMlpModel, Params, TensorEncoding};
use crate::opcount;
use crate::{Activation, Error, Result};

/// Power-of-two input scales of the quantized matrix-vector products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScales {
    pub s_a: f32,
    pub s_h: f32,
    pub s_m: f32,
}

impl Default for InputScales {
    fn default() -> Self {
        Self { s_a: 1.0, s_h: 1.0, s_m: 1.0 }
    }
}

impl InputScales {
    pub fn new(s_a: f32, s_h: f32, s_m: f32) -> Result<Self> {
        let s = Self { s_a, s_h, s_m };
        s.validate()?;
        Ok(s)
    }

    /// `2^e_a, 2^e_h, 2^e_m`.
    pub fn from_exponents(e_a: i32, e_h: i32, e_m: i32) -> Self {
        Self { s_a: 2f32.powi(e_a), s_h: 2f32.powi(e_h), s_m: 2f32.powi(e_m) }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_a", self.s_a), ("s_h", self.s_h), ("s_m", self.s_m)] {
            if !is_power_of_two(v) {
                return Err(Error::invalid(format!("{name} must be a positive power of two, got {v}")));
            }
        }
        Ok(())
    }
}

/// A quantized weight matrix together with the input scale it is applied
/// to and the derived rescale `128 * s_in * s_W`.
#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    weights: Q7Matrix,
    input_scale: f32,
    rescale: f32,
}

impl QLinear {
    fn new(weights: Q7Matrix, input_scale: f32) -> Self {
        let rescale = rescale_factor(input_scale, weights.scale());
        Self { weights, input_scale, rescale }
    }

    pub fn weights(&self) -> &Q7Matrix {
        &self.weights
    }

    pub fn input_scale(&self) -> f32 {
        self.input_scale
    }

    pub fn rescale(&self) -> f32 {
        self.rescale
    }

    /// `out = rescale(W_Q x_q)`; `tmp` holds the Q7 product.
    fn apply(&self, x_q: &[i8], tmp: &mut [i8], out: &mut [f32]) {
        q7_matvec_into(&self.weights, x_q, tmp).expect("shapes checked at construction");
        rescale_into(tmp, self.rescale, out).expect("rescale positive");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QGruLayer {
    pub w_ar: QLinear,
    pub w_hr: QLinear,
    pub w_az: QLinear,
    pub w_hz: QLinear,
    pub w_an: QLinear,
    pub w_hn: QLinear,
    pub b_ar: Vec<f32>,
    pub b_hr: Vec<f32>,
    pub b_az: Vec<f32>,
    pub b_hz: Vec<f32>,
    pub b_an: Vec<f32>,
    pub b_hn: Vec<f32>,
}

impl QGruLayer {
    fn linears(&self) -> [&QLinear; 6] {
        [&self.w_ar, &self.w_hr, &self.w_az, &self.w_hz, &self.w_an, &self.w_hn]
    }

    fn biases(&self) -> [&Vec<f32>; 6] {
        [&self.b_ar, &self.b_hr, &self.b_az, &self.b_hz, &self.b_an, &self.b_hn]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QMlp {
    pub w1: QLinear,
    pub b1: Vec<f32>,
    pub w2: QLinear,
    pub b2: Vec<f32>,
}

/// Raw quantized tensors in canonical order: per GRU layer the six weight
/// matrices `w_ar, w_hr, w_az, w_hz, w_an, w_hn`, then `mlp.w1, mlp.w2`;
/// biases likewise (`b_ar, b_hr, b_az, b_hz, b_an, b_hn` per layer, then
/// `mlp.b1, mlp.b2`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParts {
    pub weights: Vec<Q7Matrix>,
    pub biases: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGruMlpModel {
    arch: Architecture,
    pub class_names: Vec<String>,
    norm_mean: Vec<f32>,
    norm_inv_std: Vec<f32>,
    scales: InputScales,
    layers: Vec<QGruLayer>,
    mlp: QMlp,
    pub metadata: BTreeMap<String, String>,
}

/// Weight-matrix shapes in canonical order.
fn weight_shapes(arch: &Architecture) -> Vec<(usize, usize)> {
    let l = arch.hidden_size();
    let mut v = Vec::new();
    for k in 0..arch.num_gru_layers() {
        let d = arch.layer_input_dim(k);
        v.extend([(l, d), (l, l), (l, d), (l, l), (l, d), (l, l)]);
    }
    v.push((arch.mlp_hidden(), l));
    v.push((arch.num_classes(), arch.mlp_hidden()));
    v
}

fn bias_lengths(arch: &Architecture) -> Vec<usize> {
    let mut v = vec![arch.hidden_size(); 6 * arch.num_gru_layers()];
    v.push(arch.mlp_hidden());
    v.push(arch.num_classes());
    v
}

/// Canonical weight-tensor names, matching [`QuantizedParts::weights`].
pub fn weight_names(num_layers: usize) -> Vec<String> {
    let mut v = Vec::new();
    for k in 0..num_layers {
        for n in ["w_ar", "w_hr", "w_az", "w_hz", "w_an", "w_hn"] {
            v.push(format!("gru{k}.{n}"));
        }
    }
    v.extend(["mlp.w1".to_string(), "mlp.w2".to_string()]);
    v
}

pub fn bias_names(num_layers: usize) -> Vec<String> {
    let mut v = Vec::new();
    for k in 0..num_layers {
        for n in ["b_ar", "b_hr", "b_az", "b_hz", "b_an", "b_hn"] {
            v.push(format!("gru{k}.{n}"));
        }
    }
    v.extend(["mlp.b1".to_string(), "mlp.b2".to_string()]);
    v
}

/// Which input scale feeds weight matrix `idx` (canonical order).
fn input_scale_for(arch: &Architecture, idx: usize, s: &InputScales) -> f32 {
    let gru = 6 * arch.num_gru_layers();
    if idx == gru + 1 {
        s.s_m
    } else if idx == gru || idx >= 6 || idx % 2 == 1 {
        s.s_h
    } else {
        s.s_a
    }
}

/// Whether float tensor `k` (canonical order: per layer six weights then six
/// biases, then `w1, b1, w2, b2`) is a weight matrix.
fn is_weight_tensor(k: usize, num_layers: usize) -> bool {
    if k < 12 * num_layers {
        k % 12 < 6
    } else {
        (k - 12 * num_layers) % 2 == 0
    }
}

/// Quantizes every weight matrix of `model`; biases and normalization are
/// copied unchanged.
pub fn quantize_model(model: &GruMlpModel, scales: InputScales) -> Result<QuantizedGruMlpModel> {
    scales.validate()?;
    model.validate()?;
    let tensors = model.params.tensors();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let shapes = weight_shapes(&model.arch);
    let mut wi = 0;
    for (k, t) in tensors.iter().enumerate() {
        if is_weight_tensor(k, model.arch.num_gru_layers()) {
            let (r, c) = shapes[wi];
            weights.push(quantize_matrix(r, c, t)?);
            wi += 1;
        } else {
            biases.push(t.to_vec());
        }
    }
    let mut q = QuantizedGruMlpModel::from_parts(
        model.arch,
        model.class_names.clone(),
        model.norm_mean.clone(),
        model.norm_inv_std.clone(),
        scales,
        QuantizedParts { weights, biases },
    )?;
    q.metadata = model.metadata.clone();
    Ok(q)
}

impl QuantizedGruMlpModel {
    pub fn from_parts(
        arch: Architecture,
        class_names: Vec<String>,
        norm_mean: Vec<f32>,
        norm_inv_std: Vec<f32>,
        scales: InputScales,
        parts: QuantizedParts,
    ) -> Result<Self> {
        scales.validate()?;
        let shapes = weight_shapes(&arch);
        let lens = bias_lengths(&arch);
        if parts.weights.len() != shapes.len() || parts.biases.len() != lens.len() {
            return Err(Error::shape("wrong number of quantized tensors for the architecture"));
        }
        for (w, &(r, c)) in parts.weights.iter().zip(&shapes) {
            if (w.rows(), w.cols()) != (r, c) {
                return Err(Error::shape(format!("Q7 matrix is {}x{}, expected {r}x{c}", w.rows(), w.cols())));
            }
        }
        for (b, &n) in parts.biases.iter().zip(&lens) {
            if b.len() != n {
                return Err(Error::shape(format!("bias has {} entries, expected {n}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite bias"));
            }
        }
        if norm_mean.len() != arch.input_dim() || norm_inv_std.len() != arch.input_dim() {
            return Err(Error::shape("normalization vectors must have input_dim entries"));
        }
        if norm_inv_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || norm_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("invalid normalization constants"));
        }
        if class_names.len() != arch.num_classes() {
            return Err(Error::shape("class name count must equal the class count"));
        }
        let mut w = parts.weights.into_iter().enumerate().map(|(i, m)| QLinear::new(m, input_scale_for(&arch, i, &scales)));
        let mut b = parts.biases.into_iter();
        let mut next = || (w.next().expect("counted"), b.next().expect("counted"));
        let layers = (0..arch.num_gru_layers())
            .map(|_| {
                let (w_ar, b_ar) = next();
                let (w_hr, b_hr) = next();
                let (w_az, b_az) = next();
                let (w_hz, b_hz) = next();
                let (w_an, b_an) = next();
                let (w_hn, b_hn) = next();
                QGruLayer { w_ar, w_hr, w_az, w_hz, w_an, w_hn, b_ar, b_hr, b_az, b_hz, b_an, b_hn }
            })
            .collect();
        let (w1, b1) = next();
        let (w2, b2) = next();
        Ok(Self {
            arch,
            class_names,
            norm_mean,
            norm_inv_std,
            scales,
            layers,
            mlp: QMlp { w1, b1, w2, b2 },
            metadata: BTreeMap::new(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn scales(&self) -> InputScales {
        self.scales
    }

    pub fn norm_mean(&self) -> &[f32] {
        &self.norm_mean
    }

    pub fn norm_inv_std(&self) -> &[f32] {
        &self.norm_inv_std
    }

    pub fn layers(&self) -> &[QGruLayer] {
        &self.layers
    }

    pub fn mlp(&self) -> &QMlp {
        &self.mlp
    }

    /// All weight matrices in canonical order.
    pub fn linears(&self) -> Vec<&QLinear> {
        let mut v: Vec<&QLinear> = self.layers.iter().flat_map(|l| l.linears()).collect();
        v.push(&self.mlp.w1);
        v.push(&self.mlp.w2);
        v
    }

    /// All bias vectors in canonical order.
    pub fn biases(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = self.layers.iter().flat_map(|l| l.biases().map(|b| &b[..])).collect();
        v.push(&self.mlp.b1);
        v.push(&self.mlp.b2);
        v
    }

    pub fn parts(&self) -> QuantizedParts {
        QuantizedParts {
            weights: self.linears().into_iter().map(|q| q.weights.clone()).collect(),
            biases: self.biases().into_iter().map(<[f32]>::to_vec).collect(),
        }
    }

    /// Same weights with different input scales (rescales recomputed).
    pub fn with_scales(&self, scales: InputScales) -> Result<Self> {
        let mut q = Self::from_parts(
            self.arch,
            self.class_names.clone(),
            self.norm_mean.clone(),
            self.norm_inv_std.clone(),
            scales,
            self.parts(),
        )?;
        q.metadata = self.metadata.clone();
        Ok(q)
    }

    /// True when every stored rescale equals `128 * s_in * s_W` recomputed
    /// from its pair.
    pub fn rescales_consistent(&self) -> bool {
        self.linears().iter().enumerate().all(|(i, q)| {
            q.input_scale == input_scale_for(&self.arch, i, &self.scales)
                && q.rescale.to_bits() == rescale_factor(q.input_scale, q.weights.scale()).to_bits()
        })
    }

    /// Float model with the dequantized weights `s_W * q` and the same biases.
    pub fn dequantize(&self) -> GruMlpModel {
        let mut params = Params::<f32>::zeros(&self.arch);
        let weights: Vec<Vec<f32>> = self.linears().iter().map(|q| q.weights.dequantize()).collect();
        let biases = self.biases();
        let (mut wi, mut bi) = (0, 0);
        let nl = self.arch.num_gru_layers();
        for (k, t) in params.tensors_mut().into_iter().enumerate() {
            if is_weight_tensor(k, nl) {
                t.copy_from_slice(&weights[wi]);
                wi += 1;
            } else {
                t.copy_from_slice(biases[bi]);
                bi += 1;
            }
        }
        GruMlp {
            arch: self.arch,
            class_names: self.class_names.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_inv_std: self.norm_inv_std.clone(),
            params,
            metadata: self.metadata.clone(),
        }
    }

    fn check_window(&self, window: &[f32]) -> Result<()> {
        let expected = self.arch.sequence_length() * self.arch.input_dim();
        if window.len() != expected {
            return Err(Error::shape(format!("window has {} values, model expects {expected}", window.len())));
        }
        if window.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window contains non-finite values"));
        }
        Ok(())
    }

    /// Runs the quantized GRU stack, calling `visit(t, h_top)` after every
    /// step; returns the final top-layer state.
    pub fn run_gru(&self, window: &[f32], act: Activation, mut visit: impl FnMut(usize, &[f32])) -> Result<Vec<f32>> {
        self.check_window(window)?;
        let d = self.arch.input_dim();
        let l = self.arch.hidden_size();
        let mut xbar = vec![0.0f32; d];
        let mut h = vec![vec![0.0f32; l]; self.layers.len()];
        let mut s = QScratch::new(d.max(l), l);
        let mut next = vec![0.0f32; l];
        for (t, a) in window.chunks_exact(d).enumerate() {
            for ((o, &x), (&m, &sd)) in xbar.iter_mut().zip(a).zip(self.norm_mean.iter().zip(&self.norm_inv_std)) {
                *o = (x - m) * sd;
            }
            opcount::add_elementwise(d);
            for (k, layer) in self.layers.iter().enumerate() {
                let (below, rest) = h.split_at_mut(k);
                let input: &[f32] = if k == 0 { &xbar } else { &below[k - 1] };
                q_step(layer, input, &rest[0], act, &mut s, &mut next);
                rest[0].copy_from_slice(&next);
            }
            visit(t, h.last().expect("at least one layer"));
        }
        Ok(h.pop().expect("at least one layer"))
    }

    /// Logits with approximate activations.
    pub fn q_forward(&self, window: &[f32]) -> Result<Vec<f32>> {
        self.q_forward_with(window, Activation::Approx)
    }

    /// Logits with a chosen activation family (for ablations).
    pub fn q_forward_with(&self, window: &[f32], act: Activation) -> Result<Vec<f32>> {
        let h = self.run_gru(window, act, |_, _| {})?;
        Ok(self.head(&h))
    }

    pub fn hidden_trajectory(&self, window: &[f32], act: Activation) -> Result<Vec<Vec<f32>>> {
        let mut traj = Vec::with_capacity(self.arch.sequence_length());
        self.run_gru(window, act, |_, h| traj.push(h.to_vec()))?;
        Ok(traj)
    }

    fn head(&self, h: &[f32]) -> Vec<f32> {
        let m = self.arch.mlp_hidden();
        let c = self.arch.num_classes();
        let mut hq = vec![0i8; h.len()];
        to_q7_into(h, self.mlp.w1.input_scale, &mut hq).expect("finite hidden state");
        let mut tmp = vec![0i8; m];
        let mut hidden = vec![0.0f32; m];
        self.mlp.w1.apply(&hq, &mut tmp, &mut hidden);
        for (v, &b) in hidden.iter_mut().zip(&self.mlp.b1) {
            *v = (*v + b).max(0.0);
        }
        let mut mq = vec![0i8; m];
        to_q7_into(&hidden, self.mlp.w2.input_scale, &mut mq).expect("finite activations");
        let mut tmp2 = vec![0i8; c];
        let mut logits = vec![0.0f32; c];
        self.mlp.w2.apply(&mq, &mut tmp2, &mut logits);
        for (v, &b) in logits.iter_mut().zip(&self.mlp.b2) {
            *v += b;
        }
        logits
    }

    pub fn predict(&self, window: &[f32]) -> Result<usize> {
        Ok(argmax(&self.q_forward(window)?))
    }

    /// Bytes of Q7 weight storage (one per weight entry).
    pub fn weight_bytes(&self) -> usize {
        self.linears().iter().map(|q| q.weights.data().len()).sum()
    }
}

struct QScratch {
    xq: Vec<i8>,
    hq: Vec<i8>,
    tmp: Vec<i8>,
    a: Vec<f32>,
    hpart: Vec<f32>,
    r: Vec<f32>,
    z: Vec<f32>,
    hn: Vec<f32>,
}

impl QScratch {
    fn new(max_in: usize, l: usize) -> Self {
        Self {
            xq: vec![0; max_in],
            hq: vec![0; l],
            tmp: vec![0; l],
            a: vec![0.0; l],
            hpart: vec![0.0; l],
            r: vec![0.0; l],
            z: vec![0.0; l],
            hn: vec![0.0; l],
        }
    }
}

/// One quantized GRU step, mirroring the float step's arithmetic order.
fn q_step(g: &QGruLayer, x: &[f32], h_prev: &[f32], act: Activation, s: &mut QScratch, h_out: &mut [f32]) {
    let l = h_prev.len();
    let xq = &mut s.xq[..x.len()];
    to_q7_into(x, g.w_ar.input_scale, xq).expect("finite input");
    to_q7_into(h_prev, g.w_hr.input_scale, &mut s.hq).expect("finite hidden state");

    g.w_ar.apply(xq, &mut s.tmp, &mut s.a);
    g.w_hr.apply(&s.hq, &mut s.tmp, &mut s.hpart);
    for i in 0..l {
        s.r[i] = act.sigmoid((s.a[i] + g.b_ar[i]) + (s.hpart[i] + g.b_hr[i]));
    }
    g.w_az.apply(xq, &mut s.tmp, &mut s.a);
    g.w_hz.apply(&s.hq, &mut s.tmp, &mut s.hpart);
    for i in 0..l {
        s.z[i] = act.sigmoid((s.a[i] + g.b_az[i]) + (s.hpart[i] + g.b_hz[i]));
    }
    g.w_an.apply(xq, &mut s.tmp, &mut s.a);
    g.w_hn.apply(&s.hq, &mut s.tmp, &mut s.hn);
    for i in 0..l {
        s.hn[i] += g.b_hn[i];
        let n = act.tanh((s.a[i] + g.b_an[i]) + s.r[i] * s.hn[i]);
        h_out[i] = (1.0 - s.z[i]) * n + s.z[i] * h_prev[i];
    }
    opcount::add_elementwise(3 * l);
}

/// Outcome of the input-scale grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub scales: InputScales,
    /// `"mcc"`, or `"logit_mse"` when the calibration labels hold one class.
    pub objective: String,
    /// Calibration MCC of the chosen scales (absent for `"logit_mse"`).
    pub mcc: Option<f64>,
    /// Mean squared difference between quantized and float logits.
    pub logit_mse: f64,
    /// Fraction of normalized calibration inputs that saturate at `s_a`.
    pub input_saturation: f64,
    pub grid_points: usize,
}

/// Smallest and largest scale exponent searched.
pub const TUNE_EXPONENTS: std::ops::RangeInclusive<i32> = -3..=3;

/// Grid search over `s_a, s_h, s_m` in `{2^-3, ..., 2^3}` maximizing the
/// multiclass MCC of the quantized forward pass on `calibration`.
///
/// Ties in MCC are broken by the mean squared logit difference against the
/// float model, and remaining ties by the grid order (smallest sum of
/// exponents first, then `s_a`, `s_h`, `s_m`). If the calibration labels hold
/// a single class, MCC is uninformative and only the logit difference counts.
pub fn tune_input_scales(model: &GruMlpModel, calibration: &[(&[f32], usize)]) -> Result<TuneReport> {
    if calibration.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let base = quantize_model(model, InputScales::default())?;
    let c = model.arch.num_classes();
    let labels: Vec<usize> = calibration.iter().map(|(_, y)| *y).collect();
    let single_class = labels.iter().all(|&y| y == labels[0]);
    let float_logits: Vec<Vec<f32>> = calibration.iter().map(|(w, _)| model.forward(w)).collect::<Result<_>>()?;

    let mut grid: Vec<(i32, i32, i32)> = Vec::new();
    for ea in TUNE_EXPONENTS {
        for eh in TUNE_EXPONENTS {
            for em in TUNE_EXPONENTS {
                grid.push((ea, eh, em));
            }
        }
    }
    grid.sort_by_key(|&(a, h, m)| (a + h + m, a, h, m));

    // (mcc, mse, scales); mcc is 0 throughout in the single-class case
    let mut best: Option<(f64, f64, InputScales)> = None;
    let mut preds = Vec::with_capacity(calibration.len());
    for &(ea, eh, em) in &grid {
        let scales = InputScales::from_exponents(ea, eh, em);
        let q = base.with_scales(scales)?;
        let mut se = 0.0f64;
        preds.clear();
        for ((w, _), fl) in calibration.iter().zip(&float_logits) {
            let ql = q.q_forward(w)?;
            se += ql.iter().zip(fl).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
            preds.push(argmax(&ql));
        }
        let mse = se / (calibration.len() * c) as f64;
        let mcc = if single_class { 0.0 } else { mcc_multiclass(&confusion(&preds, &labels, c)?)? };
        let better = match best {
            None => true,
            Some((bm, be, _)) => mcc > bm || (mcc == bm && mse < be),
        };
        if better {
            best = Some((mcc, mse, scales));
        }
    }
    let (mcc, logit_mse, scales) = best.expect("grid is non-empty");
    Ok(TuneReport {
        scales,
        objective: if single_class { "logit_mse" } else { "mcc" }.into(),
        mcc: (!single_class).then_some(mcc),
        logit_mse,
        input_saturation: input_saturation(model, calibration, scales.s_a),
        grid_points: grid.len(),
    })
}

/// Fraction of normalized inputs with `|128 x / s_a|` beyond the Q7 range.
pub fn input_saturation(model: &GruMlpModel, windows: &[(&[f32], usize)], s_a: f32) -> f64 {
    let d = model.arch.input_dim();
    let (mut sat, mut total) = (0usize, 0usize);
    for (w, _) in windows {
        for row in w.chunks_exact(d) {
            for (k, &x) in row.iter().enumerate() {
                let v = (x - model.norm_mean[k]) * model.norm_inv_std[k] * 128.0 / s_a;
                if v.round() > 127.0 || v.round() < -128.0 {
                    sat += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        sat as f64 / total as f64
    }
}

pub const QUANTIZED_MODEL_KIND: &str = "gru_mlp_q7";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QWeightDoc {
    shape: [usize; 2],
    scale: f32,
    input_scale: f32,
    rescale: f32,
    data: Vec<i8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QModelDocument {
    format_version: u32,
    kind: String,
    arch: Architecture,
    class_names: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    scales: InputScales,
    norm_mean: Value,
    norm_inv_std: Value,
    weights: BTreeMap<String, QWeightDoc>,
    biases: BTreeMap<String, Value>,
}

impl QuantizedGruMlpModel {
    /// JSON form: integer arrays for weights, base64 little-endian `f32`
    /// for biases and normalization (bit-exact).
    pub fn to_json_string(&self) -> Result<String> {
        let nl = self.arch.num_gru_layers();
        let d = [self.arch.input_dim()];
        let enc = TensorEncoding::Base64F32le;
        let weights = weight_names(nl)
            .into_iter()
            .zip(self.linears())
            .map(|(n, q)| {
                let w = &q.weights;
                (n, QWeightDoc { shape: [w.rows(), w.cols()], scale: w.scale(), input_scale: q.input_scale, rescale: q.rescale, data: w.data().to_vec() })
            })
            .collect();
        let biases = bias_names(nl).into_iter().zip(self.biases()).map(|(n, b)| (n, encode_f32(b, &[b.len()], enc))).collect();
        let doc = QModelDocument {
            format_version: crate::model::MODEL_FORMAT_VERSION,
            kind: QUANTIZED_MODEL_KIND.into(),
            arch: self.arch,
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
            scales: self.scales,
            norm_mean: encode_f32(&self.norm_mean, &d, enc),
            norm_inv_std: encode_f32(&self.norm_inv_std, &d, enc),
            weights,
            biases,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: QModelDocument = serde_json::from_str(s)?;
        if doc.kind != QUANTIZED_MODEL_KIND {
            return Err(Error::DataContract(format!("expected a {QUANTIZED_MODEL_KIND} model, found {}", doc.kind)));
        }
        if doc.format_version != crate::model::MODEL_FORMAT_VERSION {
            return Err(Error::DataContract(format!("unsupported model format version {}", doc.format_version)));
        }
        let arch = doc.arch;
        let nl = arch.num_gru_layers();
        let enc = TensorEncoding::Base64F32le;
        let weights = weight_names(nl)
            .iter()
            .map(|n| {
                let w = doc.weights.get(n).ok_or_else(|| Error::DataContract(format!("missing tensor {n}")))?;
                Q7Matrix::from_parts(w.shape[0], w.shape[1], w.data.clone(), w.scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = bias_names(nl)
            .iter()
            .zip(bias_lengths(&arch))
            .map(|(n, len)| {
                let v = doc.biases.get(n).ok_or_else(|| Error::DataContract(format!("missing tensor {n}")))?;
                decode_f32(v, &[len], enc, n)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = [arch.input_dim()];
        let mut q = Self::from_parts(
            arch,
            doc.class_names.clone(),
            decode_f32(&doc.norm_mean, &d, enc, "norm_mean")?,
            decode_f32(&doc.norm_inv_std, &d, enc, "norm_inv_std")?,
            doc.scales,
            QuantizedParts { weights, biases },
        )?;
        for (n, lin) in weight_names(nl).iter().zip(q.linears()) {
            let stored = &doc.weights[n];
            if stored.rescale.to_bits() != lin.rescale.to_bits() || stored.input_scale.to_bits() != lin.input_scale.to_bits() {
                return Err(Error::DataContract(format!("tensor {n}: stored rescale does not match 128 * s_in * s_W")));
            }
        }
        if doc.weights.len() != weight_names(nl).len() || doc.biases.len() != bias_names(nl).len() {
            return Err(Error::DataContract("model has unexpected extra tensors".into()));
        }
        q.metadata = doc.metadata;
        Ok(q)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Either kind of stored model, told apart by the `kind` field.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(GruMlpModel),
    Quantized(QuantizedGruMlpModel),
}

impl AnyModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        match v.get("kind").and_then(Value::as_str) {
            Some(QUANTIZED_MODEL_KIND) => Ok(Self::Quantized(QuantizedGruMlpModel::from_json_str(s)?)),
            Some(_) => Ok(Self::Float(GruMlpModel::from_json_str(s)?)),
            None => Err(Error::DataContract("model file has no kind field".into())),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn arch(&self) -> &Architecture {
        match self {
            Self::Float(m) => &m.arch,
            Self::Quantized(q) => q.arch(),
        }
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            Self::Float(m) => &m.class_names,
            Self::Quantized(q) => &q.class_names,
        }
    }

    /// Logits on the model's native path: exact activations for float
    /// models, Q7 kernels with approximations for quantized ones.
    pub fn logits(&self, window: &[f32]) -> Result<Vec<f32>> {
        match self {
            Self::Float(m) => m.forward(window),
            Self::Quantized(q) => q.q_forward(window),
        }
    }
}
