//! Q7 fixed-point primitives.
//!
//! A Q7 number is a signed byte `q` read as `q / 128`, covering
//! `[-1, 127/128]`. Weight matrices are quantized per tensor with a
//! symmetric scale (zero point 0), activations are brought into Q7 by
//! dividing by a power-of-two input scale, and the matrix-vector product is
//! computed with a 32-bit accumulator followed by a rounding right shift.

use serde::{Deserialize, Serialize};

use crate::opcount;
use crate::{Error, Result};

/// Fixed-point one: the implicit denominator of every Q7 value.
pub const Q7_ONE: f32 = 128.0;

/// Largest column count for which a 32-bit accumulator cannot overflow
/// (`128 * 128 * 2^17 = 2^31`).
pub const MAX_COLS: usize = 1 << 17;

/// Largest max-magnitude-to-scale ratio: `max|W| / s = 255 / 2`.
const HALF_RANGE: f64 = 127.5;

#[inline]
fn saturate_i8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// Round half away from zero, then saturate to `i8`.
#[inline]
fn round_to_i8(x: f64) -> i8 {
    // f64::round already rounds ties away from zero.
    saturate_i8(x.round() as i64)
}

/// A per-tensor quantized weight matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Q7Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scale: f32,
}

impl Q7Matrix {
    pub fn from_parts(rows: usize, cols: usize, data: Vec<i8>, scale: f32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("Q7 matrix must be non-empty, got {rows}x{cols}")));
        }
        if cols > MAX_COLS {
            return Err(Error::invalid(format!(
                "Q7 matrix has {cols} columns; at most {MAX_COLS} fit a 32-bit accumulator"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "Q7 matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("Q7 scale must be positive and finite, got {scale}")));
        }
        Ok(Self { rows, cols, data, scale })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `scale * q` for every entry.
    pub fn dequantize(&self) -> Vec<f32> {
        self.data.iter().map(|&q| self.scale * q as f32).collect()
    }
}

/// A vector of Q7 values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Q7Vector {
    data: Vec<i8>,
}

impl Q7Vector {
    pub fn new(data: Vec<i8>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<i8> {
        self.data
    }
}

/// Per-tensor symmetric quantization: `s = (2/255) max|W|`,
/// `q = clamp(round(W / s), -128, 127)`.
///
/// An all-zero matrix gets scale 1 and all-zero entries.
pub fn quantize_matrix(rows: usize, cols: usize, weights: &[f32]) -> Result<Q7Matrix> {
    if weights.len() != rows * cols {
        return Err(Error::shape(format!(
            "weight buffer has {} entries, expected {rows}x{cols}",
            weights.len()
        )));
    }
    if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("non-finite weight {bad}")));
    }
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Q7Matrix::from_parts(rows, cols, vec![0; weights.len()], 1.0);
    }
    // w / s evaluated as w * 127.5 / max|W| so that the extremum lands on
    // exactly +-127.5 regardless of how the f32 scale rounds.
    let inv = HALF_RANGE / max_abs as f64;
    let data = weights.iter().map(|&w| round_to_i8(w as f64 * inv)).collect();
    let scale = (2.0 / 255.0 * max_abs as f64) as f32;
    Q7Matrix::from_parts(rows, cols, data, scale)
}

/// `q_i = clamp(round(128 x_i / input_scale), -128, 127)`.
pub fn to_q7(x: &[f32], input_scale: f32) -> Result<Q7Vector> {
    let mut out = vec![0i8; x.len()];
    to_q7_into(x, input_scale, &mut out)?;
    Ok(Q7Vector::new(out))
}

/// Allocation-free [`to_q7`].
pub fn to_q7_into(x: &[f32], input_scale: f32, out: &mut [i8]) -> Result<()> {
    if !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(Error::invalid(format!("input scale must be positive, got {input_scale}")));
    }
    if x.len() != out.len() {
        return Err(Error::shape(format!("to_q7: {} inputs, {} outputs", x.len(), out.len())));
    }
    let factor = Q7_ONE as f64 / input_scale as f64;
    for (o, &v) in out.iter_mut().zip(x) {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite activation {v}")));
        }
        *o = round_to_i8(v as f64 * factor);
    }
    opcount::add_elementwise(x.len());
    Ok(())
}

/// Saturating Q7 matrix-vector product.
///
/// Each row accumulates `sum a_ij * x_j` in 32 bits, adds `2^6` and shifts
/// right arithmetically by 7 before saturating back to `i8`.
pub fn q7_matvec(a: &Q7Matrix, x: &Q7Vector) -> Result<Q7Vector> {
    let mut out = vec![0i8; a.rows];
    q7_matvec_into(a, x.data(), &mut out)?;
    Ok(Q7Vector::new(out))
}

/// Allocation-free [`q7_matvec`]. Performs integer arithmetic only.
pub fn q7_matvec_into(a: &Q7Matrix, x: &[i8], out: &mut [i8]) -> Result<()> {
    if x.len() != a.cols {
        return Err(Error::shape(format!(
            "q7_matvec: matrix has {} columns, vector has {} entries",
            a.cols,
            x.len()
        )));
    }
    if out.len() != a.rows {
        return Err(Error::shape(format!(
            "q7_matvec: matrix has {} rows, output has {} entries",
            a.rows,
            out.len()
        )));
    }
    for (o, row) in out.iter_mut().zip(a.data.chunks_exact(a.cols)) {
        let acc: i32 = row.iter().zip(x).map(|(&w, &v)| w as i32 * v as i32).sum();
        *o = saturate_i8(((acc + (1 << 6)) >> 7) as i64);
    }
    opcount::add_mvm_int(a.rows * a.cols);
    Ok(())
}

/// `(y_i / 128) * rescale`, where `rescale = 128 * s_in * s_W`.
pub fn rescale_to_float(y: &Q7Vector, rescale: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; y.len()];
    rescale_into(y.data(), rescale, &mut out)?;
    Ok(out)
}

/// Allocation-free [`rescale_to_float`].
pub fn rescale_into(y: &[i8], rescale: f32, out: &mut [f32]) -> Result<()> {
    if !(rescale.is_finite() && rescale > 0.0) {
        return Err(Error::invalid(format!("rescale must be positive, got {rescale}")));
    }
    if y.len() != out.len() {
        return Err(Error::shape(format!("rescale: {} inputs, {} outputs", y.len(), out.len())));
    }
    for (o, &q) in out.iter_mut().zip(y) {
        // q / 128 is exact in f32.
        *o = (q as f32 / Q7_ONE) * rescale;
    }
    opcount::add_elementwise(y.len());
    Ok(())
}

/// The rescale factor `128 * s_in * s_W` that maps a Q7 MVM result back
/// into float units.
pub fn rescale_factor(input_scale: f32, weight_scale: f32) -> f32 {
    Q7_ONE * input_scale * weight_scale
}

/// True when `x` is an exact (normal) power of two.
pub fn is_power_of_two(x: f32) -> bool {
    x.is_normal() && x > 0.0 && x.to_bits() & 0x007f_ffff == 0
}
