//! Float GRU-MLP classifier.
//!
//! Per timestep the window sample is normalized, `a' = (a - m) * s`, and fed
//! through one or two stacked GRU layers:
//!
//! ```text
//! r = sigmoid(W_ar a' + b_ar + W_hr h + b_hr)
//! z = sigmoid(W_az a' + b_az + W_hz h + b_hz)
//! n = tanh(W_an a' + b_an + r * (W_hn h + b_hn))
//! h = (1 - z) * n + z * h
//! ```
//!
//! The last hidden state of the top layer goes through a one-hidden-layer
//! ReLU MLP producing `C` logits.

mod arch;
pub(crate) mod io;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::activations::Activation;
use crate::opcount;
use crate::{Error, Real, Result};
pub use arch::{ArchSpec, Architecture};
pub use io::{ModelDocument, TensorEncoding, MODEL_FORMAT_VERSION};

/// Dot product with eight independent partial sums (lets the compiler
/// vectorize; the summation order is fixed, so results are deterministic).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} matrix given {} entries", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
        opcount::add_mvm_float(self.rows * self.cols);
    }

    /// `out += self^T * d`.
    pub(crate) fn matvec_t_acc(&self, d: &[T], out: &mut [T]) {
        for (row, &dr) in self.data.chunks_exact(self.cols).zip(d) {
            if dr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + w * dr;
            }
        }
    }

    /// `self += d * x^T`.
    pub(crate) fn outer_acc(&mut self, d: &[T], x: &[T]) {
        for (row, &dr) in self.data.chunks_exact_mut(self.cols).zip(d) {
            if dr == T::zero() {
                continue;
            }
            for (w, &xv) in row.iter_mut().zip(x) {
                *w = *w + dr * xv;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: cast_vec(&self.data) }
    }
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64(x.to_f64_lossless()).expect("finite cast")).collect()
}

/// Weights and biases of one GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<T> {
    pub w_ar: Matrix<T>,
    pub w_az: Matrix<T>,
    pub w_an: Matrix<T>,
    pub w_hr: Matrix<T>,
    pub w_hz: Matrix<T>,
    pub w_hn: Matrix<T>,
    pub b_ar: Vec<T>,
    pub b_hr: Vec<T>,
    pub b_az: Vec<T>,
    pub b_hz: Vec<T>,
    pub b_an: Vec<T>,
    pub b_hn: Vec<T>,
}

/// Buffers for one GRU step; after [`GruLayer::step`] they hold the gate
/// values of that step (read back by the backward pass).
#[derive(Debug, Clone)]
pub struct StepScratch<T> {
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    /// `W_hn h + b_hn`
    pub hn: Vec<T>,
    tmp_a: Vec<T>,
    tmp_h: Vec<T>,
}

impl<T: Real> StepScratch<T> {
    pub fn new(hidden: usize) -> Self {
        let z = vec![T::zero(); hidden];
        Self { r: z.clone(), z: z.clone(), n: z.clone(), hn: z.clone(), tmp_a: z.clone(), tmp_h: z }
    }
}

impl<T: Real> GruLayer<T> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let mi = || Matrix::zeros(hidden, input);
        let mh = || Matrix::zeros(hidden, hidden);
        let b = || vec![T::zero(); hidden];
        Self {
            w_ar: mi(),
            w_az: mi(),
            w_an: mi(),
            w_hr: mh(),
            w_hz: mh(),
            w_hn: mh(),
            b_ar: b(),
            b_hr: b(),
            b_az: b(),
            b_hz: b(),
            b_an: b(),
            b_hn: b(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_ar.rows
    }

    pub fn input_size(&self) -> usize {
        self.w_ar.cols
    }

    /// One GRU step: writes `h_t` into `h_out`.
    pub fn step(&self, x: &[T], h_prev: &[T], act: Activation, s: &mut StepScratch<T>, h_out: &mut [T]) {
        let l = self.hidden_size();
        debug_assert_eq!(h_prev.len(), l);

        self.w_ar.matvec_into(x, &mut s.tmp_a);
        self.w_hr.matvec_into(h_prev, &mut s.tmp_h);
        for i in 0..l {
            s.r[i] = act.sigmoid((s.tmp_a[i] + self.b_ar[i]) + (s.tmp_h[i] + self.b_hr[i]));
        }

        self.w_az.matvec_into(x, &mut s.tmp_a);
        self.w_hz.matvec_into(h_prev, &mut s.tmp_h);
        for i in 0..l {
            s.z[i] = act.sigmoid((s.tmp_a[i] + self.b_az[i]) + (s.tmp_h[i] + self.b_hz[i]));
        }

        self.w_an.matvec_into(x, &mut s.tmp_a);
        self.w_hn.matvec_into(h_prev, &mut s.hn);
        for i in 0..l {
            s.hn[i] = s.hn[i] + self.b_hn[i];
            s.n[i] = act.tanh((s.tmp_a[i] + self.b_an[i]) + s.r[i] * s.hn[i]);
            h_out[i] = (T::one() - s.z[i]) * s.n[i] + s.z[i] * h_prev[i];
        }
        opcount::add_elementwise(3 * l);
    }

    fn check_shapes(&self, hidden: usize, input: usize, which: usize) -> Result<()> {
        let ok = [&self.w_ar, &self.w_az, &self.w_an].iter().all(|m| m.rows == hidden && m.cols == input)
            && [&self.w_hr, &self.w_hz, &self.w_hn].iter().all(|m| m.rows == hidden && m.cols == hidden)
            && [&self.b_ar, &self.b_hr, &self.b_az, &self.b_hz, &self.b_an, &self.b_hn]
                .iter()
                .all(|b| b.len() == hidden);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("GRU layer {which} does not match {hidden}x{input}")))
        }
    }

    fn cast<U: Real>(&self) -> GruLayer<U> {
        GruLayer {
            w_ar: self.w_ar.cast(),
            w_az: self.w_az.cast(),
            w_an: self.w_an.cast(),
            w_hr: self.w_hr.cast(),
            w_hz: self.w_hz.cast(),
            w_hn: self.w_hn.cast(),
            b_ar: cast_vec(&self.b_ar),
            b_hr: cast_vec(&self.b_hr),
            b_az: cast_vec(&self.b_az),
            b_hz: cast_vec(&self.b_hz),
            b_an: cast_vec(&self.b_an),
            b_hn: cast_vec(&self.b_hn),
        }
    }
}

/// The classifier head: `W2 relu(W1 h + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(hidden: usize, mlp_hidden: usize, classes: usize) -> Self {
        Self {
            w1: Matrix::zeros(mlp_hidden, hidden),
            b1: vec![T::zero(); mlp_hidden],
            w2: Matrix::zeros(classes, mlp_hidden),
            b2: vec![T::zero(); classes],
        }
    }

    /// Returns the logits; `hidden_act` receives `relu(W1 h + b1)`.
    pub fn forward(&self, h: &[T], hidden_act: &mut [T]) -> Vec<T> {
        self.w1.matvec_into(h, hidden_act);
        for (v, &b) in hidden_act.iter_mut().zip(&self.b1) {
            *v = (*v + b).max(T::zero());
        }
        let mut logits = vec![T::zero(); self.w2.rows];
        self.w2.matvec_into(hidden_act, &mut logits);
        for (v, &b) in logits.iter_mut().zip(&self.b2) {
            *v = *v + b;
        }
        logits
    }

    fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp { w1: self.w1.cast(), b1: cast_vec(&self.b1), w2: self.w2.cast(), b2: cast_vec(&self.b2) }
    }
}

/// All trainable tensors of a GRU-MLP. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<GruLayer<T>>,
    pub mlp: Mlp<T>,
}

/// Gradients of a loss with respect to every trainable tensor.
pub type Gradients<T> = Params<T>;

impl<T: Real> Params<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let l = arch.hidden_size();
        Self {
            layers: (0..arch.num_gru_layers()).map(|i| GruLayer::zeros(l, arch.layer_input_dim(i))).collect(),
            mlp: Mlp::zeros(l, arch.mlp_hidden(), arch.num_classes()),
        }
    }

    /// Tensor names in canonical order, matching [`tensors`](Self::tensors).
    pub fn tensor_names(num_layers: usize) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..num_layers {
            for t in LAYER_TENSORS {
                names.push(format!("gru{i}.{t}"));
            }
        }
        names.extend(["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"].map(String::from));
        names
    }

    /// Flat views of every tensor, in canonical order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for g in &self.layers {
            v.extend([
                g.w_ar.data(),
                g.w_hr.data(),
                g.w_az.data(),
                g.w_hz.data(),
                g.w_an.data(),
                g.w_hn.data(),
                &g.b_ar[..],
                &g.b_hr[..],
                &g.b_az[..],
                &g.b_hz[..],
                &g.b_an[..],
                &g.b_hn[..],
            ]);
        }
        v.extend([self.mlp.w1.data(), &self.mlp.b1[..], self.mlp.w2.data(), &self.mlp.b2[..]]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for g in &mut self.layers {
            v.push(g.w_ar.data_mut());
            v.push(g.w_hr.data_mut());
            v.push(g.w_az.data_mut());
            v.push(g.w_hz.data_mut());
            v.push(g.w_an.data_mut());
            v.push(g.w_hn.data_mut());
            v.push(&mut g.b_ar);
            v.push(&mut g.b_hr);
            v.push(&mut g.b_az);
            v.push(&mut g.b_hz);
            v.push(&mut g.b_an);
            v.push(&mut g.b_hn);
        }
        v.push(self.mlp.w1.data_mut());
        v.push(&mut self.mlp.b1);
        v.push(self.mlp.w2.data_mut());
        v.push(&mut self.mlp.b2);
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { layers: self.layers.iter().map(GruLayer::cast).collect(), mlp: self.mlp.cast() }
    }
}

/// Per-layer tensor names in canonical order.
pub const LAYER_TENSORS: [&str; 12] =
    ["w_ar", "w_hr", "w_az", "w_hz", "w_an", "w_hn", "b_ar", "b_hr", "b_az", "b_hz", "b_an", "b_hn"];

/// A GRU-MLP classifier with element type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruMlp<T> {
    pub arch: Architecture,
    pub class_names: Vec<String>,
    /// Per-axis normalization mean `m`.
    pub norm_mean: Vec<T>,
    /// Per-axis normalization inverse standard deviation `s`.
    pub norm_inv_std: Vec<T>,
    pub params: Params<T>,
    /// Free-form provenance (training mode, teacher, seed, ...).
    pub metadata: BTreeMap<String, String>,
}

/// The stored, FP32 model.
pub type GruMlpModel = GruMlp<f32>;

pub fn default_class_names(c: usize) -> Vec<String> {
    if c == 3 {
        ["grazing", "resting", "alia"].map(String::from).to_vec()
    } else {
        (0..c).map(|k| format!("class_{k}")).collect()
    }
}

impl<T: Real> GruMlp<T> {
    /// All weights and biases zero, identity normalization.
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            class_names: default_class_names(arch.num_classes()),
            norm_mean: vec![T::zero(); arch.input_dim()],
            norm_inv_std: vec![T::one(); arch.input_dim()],
            params: Params::zeros(&arch),
            metadata: BTreeMap::new(),
        }
    }

    /// Seeded initialization: every weight uniform in `(-1/sqrt(L), 1/sqrt(L))`,
    /// biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut model = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (arch.hidden_size() as f64).sqrt();
        let names = Params::<T>::tensor_names(arch.num_gru_layers());
        for (name, t) in names.iter().zip(model.params.tensors_mut()) {
            let is_weight = name.rsplit('.').next().is_some_and(|n| n.starts_with('w'));
            if is_weight {
                for v in t.iter_mut() {
                    *v = T::lit(rng.random_range(-bound..bound));
                }
            }
        }
        model
    }

    pub fn with_norm(mut self, mean: &[f32], inv_std: &[f32]) -> Result<Self> {
        if mean.len() != self.arch.input_dim() || inv_std.len() != self.arch.input_dim() {
            return Err(Error::shape("normalization vectors must have input_dim entries"));
        }
        if inv_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("normalization inverse std must be positive"));
        }
        self.norm_mean = cast_vec(mean);
        self.norm_inv_std = cast_vec(inv_std);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.params.layers.len() != a.num_gru_layers() {
            return Err(Error::shape(format!(
                "model has {} GRU layers, architecture says {}",
                self.params.layers.len(),
                a.num_gru_layers()
            )));
        }
        for (i, g) in self.params.layers.iter().enumerate() {
            g.check_shapes(a.hidden_size(), a.layer_input_dim(i), i)?;
        }
        let m = &self.params.mlp;
        if m.w1.rows != a.mlp_hidden()
            || m.w1.cols != a.hidden_size()
            || m.b1.len() != a.mlp_hidden()
            || m.w2.rows != a.num_classes()
            || m.w2.cols != a.mlp_hidden()
            || m.b2.len() != a.num_classes()
        {
            return Err(Error::shape("MLP tensors do not match the architecture"));
        }
        if self.norm_mean.len() != a.input_dim() || self.norm_inv_std.len() != a.input_dim() {
            return Err(Error::shape("normalization vectors must have input_dim entries"));
        }
        if self.norm_inv_std.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::invalid("normalization inverse std must be positive"));
        }
        if self.class_names.len() != a.num_classes() {
            return Err(Error::shape("class name count must equal the class count"));
        }
        if !self.params.is_finite() || self.norm_mean.iter().chain(&self.norm_inv_std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model contains non-finite values"));
        }
        Ok(())
    }

    /// Element-wise `(a - m) * s`.
    pub fn normalize(&self, a: &[T], out: &mut [T]) {
        for ((o, &x), (&m, &s)) in out.iter_mut().zip(a).zip(self.norm_mean.iter().zip(&self.norm_inv_std)) {
            *o = (x - m) * s;
        }
        opcount::add_elementwise(a.len());
    }

    fn check_window(&self, window: &[T]) -> Result<()> {
        let expected = self.arch.sequence_length() * self.arch.input_dim();
        if window.len() != expected {
            return Err(Error::shape(format!(
                "window has {} values, model expects {} ({} steps x {} axes)",
                window.len(),
                expected,
                self.arch.sequence_length(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the GRU stack over a row-major `N x input_dim` window and calls
    /// `visit(t, h_top)` after every step. Returns the final top-layer state.
    pub fn run_gru(&self, window: &[T], act: Activation, mut visit: impl FnMut(usize, &[T])) -> Result<Vec<T>> {
        self.check_window(window)?;
        let d = self.arch.input_dim();
        let l = self.arch.hidden_size();
        let mut xbar = vec![T::zero(); d];
        let mut h: Vec<Vec<T>> = vec![vec![T::zero(); l]; self.params.layers.len()];
        let mut next = vec![T::zero(); l];
        let mut scratch = StepScratch::new(l);
        for (t, a) in window.chunks_exact(d).enumerate() {
            self.normalize(a, &mut xbar);
            for (k, layer) in self.params.layers.iter().enumerate() {
                let (below, rest) = h.split_at_mut(k);
                let input: &[T] = if k == 0 { &xbar } else { &below[k - 1] };
                layer.step(input, &rest[0], act, &mut scratch, &mut next);
                rest[0].copy_from_slice(&next);
            }
            visit(t, h.last().expect("at least one layer"));
        }
        Ok(h.pop().expect("at least one layer"))
    }

    /// Logits with exact activations.
    pub fn forward(&self, window: &[T]) -> Result<Vec<T>> {
        self.forward_with(window, Activation::Exact)
    }

    pub fn forward_with(&self, window: &[T], act: Activation) -> Result<Vec<T>> {
        let h = self.run_gru(window, act, |_, _| {})?;
        let mut hidden = vec![T::zero(); self.arch.mlp_hidden()];
        Ok(self.params.mlp.forward(&h, &mut hidden))
    }

    /// Top-layer hidden state after every timestep.
    pub fn hidden_trajectory(&self, window: &[T], act: Activation) -> Result<Vec<Vec<T>>> {
        let mut traj = Vec::with_capacity(self.arch.sequence_length());
        self.run_gru(window, act, |_, h| traj.push(h.to_vec()))?;
        Ok(traj)
    }

    pub fn predict(&self, window: &[T]) -> Result<usize> {
        Ok(argmax(&self.forward(window)?))
    }

    pub fn cast<U: Real>(&self) -> GruMlp<U> {
        GruMlp {
            arch: self.arch,
            class_names: self.class_names.clone(),
            norm_mean: cast_vec(&self.norm_mean),
            norm_inv_std: cast_vec(&self.norm_inv_std),
            params: self.params.cast(),
            metadata: self.metadata.clone(),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
