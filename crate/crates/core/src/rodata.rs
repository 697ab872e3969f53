//! Packed read-only parameter images.
//!
//! Layout (all little-endian, no padding):
//!
//! ```text
//! header   16 B  magic "KDQ7" | version u16 | layers u8 | input_dim u8
//!                | hidden u16 | classes u16 | seq_len u32
//! scales   12 B  s_a, s_h, s_m as f32
//! norm           mean[input_dim] f32, inv_std[input_dim] f32
//! per GRU layer  for w in (w_ar, w_hr, w_az, w_hz, w_an, w_hn):
//!                    scale f32, then rows*cols i8 row-major
//!                biases b_ar, b_hr, b_az, b_hz, b_an, b_hn as f32 arrays
//! MLP            w1 (scale f32 + i8), b1 f32, w2 (scale f32 + i8), b2 f32
//! ```
//!
//! Rescale factors are not stored; they follow from the scales. The float
//! image uses magic "KDF4", has no scale block, and stores every weight as
//! an `f32` array with no per-tensor scale.

use crate::fxp::Q7Matrix;
use crate::model::{default_class_names, Architecture, GruMlp, GruMlpModel, Params};
use crate::qmodel::{InputScales, QuantizedGruMlpModel, QuantizedParts};
use crate::{Error, Result};

pub const Q7_MAGIC: &[u8; 4] = b"KDQ7";
pub const FP32_MAGIC: &[u8; 4] = b"KDF4";
pub const RODATA_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

fn header(magic: &[u8; 4], a: &Architecture) -> Vec<u8> {
    let mut b = Vec::with_capacity(HEADER_LEN);
    b.extend_from_slice(magic);
    b.extend_from_slice(&RODATA_VERSION.to_le_bytes());
    b.push(a.num_gru_layers() as u8);
    b.push(a.input_dim() as u8);
    b.extend_from_slice(&(a.hidden_size() as u16).to_le_bytes());
    b.extend_from_slice(&(a.num_classes() as u16).to_le_bytes());
    b.extend_from_slice(&(a.sequence_length() as u32).to_le_bytes());
    b
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_q7(b: &mut Vec<u8>, m: &Q7Matrix) {
    b.extend_from_slice(&m.scale().to_le_bytes());
    b.extend(m.data().iter().map(|&q| q as u8));
}

pub fn export_rodata(q: &QuantizedGruMlpModel) -> Vec<u8> {
    let a = q.arch();
    let mut b = header(Q7_MAGIC, a);
    let s = q.scales();
    put_f32s(&mut b, &[s.s_a, s.s_h, s.s_m]);
    put_f32s(&mut b, q.norm_mean());
    put_f32s(&mut b, q.norm_inv_std());
    let lin = q.linears();
    let bias = q.biases();
    for k in 0..a.num_gru_layers() {
        for w in &lin[6 * k..6 * k + 6] {
            put_q7(&mut b, w.weights());
        }
        for v in &bias[6 * k..6 * k + 6] {
            put_f32s(&mut b, v);
        }
    }
    let g = 6 * a.num_gru_layers();
    put_q7(&mut b, lin[g].weights());
    put_f32s(&mut b, bias[g]);
    put_q7(&mut b, lin[g + 1].weights());
    put_f32s(&mut b, bias[g + 1]);
    debug_assert_eq!(b.len(), q7_image_size(a));
    b
}

pub fn export_fp32_rodata(m: &GruMlpModel) -> Vec<u8> {
    let mut b = header(FP32_MAGIC, &m.arch);
    put_f32s(&mut b, &m.norm_mean);
    put_f32s(&mut b, &m.norm_inv_std);
    for t in m.params.tensors() {
        put_f32s(&mut b, t);
    }
    debug_assert_eq!(b.len(), fp32_image_size(&m.arch));
    b
}

/// Size in bytes of the Q7 image for `a`.
pub fn q7_image_size(a: &Architecture) -> usize {
    let l = a.hidden_size();
    let gru: usize = (0..a.num_gru_layers()).map(|k| 6 * 4 + 3 * (l * a.layer_input_dim(k) + l * l) + 6 * l * 4).sum();
    let m = a.mlp_hidden();
    let c = a.num_classes();
    HEADER_LEN + 12 + 8 * a.input_dim() + gru + (4 + m * l + 4 * m) + (4 + c * m + 4 * c)
}

/// Size in bytes of the FP32 image for `a`.
pub fn fp32_image_size(a: &Architecture) -> usize {
    HEADER_LEN + 4 * a.count_params()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::DataContract(format!("rodata image truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let s = self.take(4 * n)?;
        Ok(s.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn q7(&mut self, rows: usize, cols: usize) -> Result<Q7Matrix> {
        let scale = self.f32s(1)?[0];
        let data = self.take(rows * cols)?.iter().map(|&b| b as i8).collect();
        Q7Matrix::from_parts(rows, cols, data, scale)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<Architecture> {
        if self.take(4)? != magic {
            return Err(Error::DataContract(format!("bad rodata magic; expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.u16()?;
        if version != RODATA_VERSION {
            return Err(Error::DataContract(format!("unsupported rodata version {version}")));
        }
        let layers = self.u8()? as usize;
        let input_dim = self.u8()? as usize;
        let hidden = self.u16()? as usize;
        let classes = self.u16()? as usize;
        let n = self.u32()? as usize;
        Architecture::new(layers, hidden, classes, n, input_dim)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::DataContract(format!("{} trailing bytes in rodata image", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Rebuilds a quantized model from its image. Class names are not stored
/// and come back as the defaults.
pub fn import_rodata(bytes: &[u8]) -> Result<QuantizedGruMlpModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let a = r.header(Q7_MAGIC)?;
    let s = r.f32s(3)?;
    let d = a.input_dim();
    let l = a.hidden_size();
    let mean = r.f32s(d)?;
    let inv_std = r.f32s(d)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for k in 0..a.num_gru_layers() {
        let din = a.layer_input_dim(k);
        for j in 0..6 {
            weights.push(r.q7(l, if j % 2 == 0 { din } else { l })?);
        }
        for _ in 0..6 {
            biases.push(r.f32s(l)?);
        }
    }
    let m = a.mlp_hidden();
    weights.push(r.q7(m, l)?);
    biases.push(r.f32s(m)?);
    weights.push(r.q7(a.num_classes(), m)?);
    biases.push(r.f32s(a.num_classes())?);
    r.finish()?;
    QuantizedGruMlpModel::from_parts(
        a,
        default_class_names(a.num_classes()),
        mean,
        inv_std,
        InputScales::new(s[0], s[1], s[2])?,
        QuantizedParts { weights, biases },
    )
}

pub fn import_fp32_rodata(bytes: &[u8]) -> Result<GruMlpModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let a = r.header(FP32_MAGIC)?;
    let mut model = GruMlp::<f32>::zeros(a);
    model.norm_mean = r.f32s(a.input_dim())?;
    model.norm_inv_std = r.f32s(a.input_dim())?;
    let mut params = Params::<f32>::zeros(&a);
    for t in params.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&r.f32s(n)?);
    }
    r.finish()?;
    model.params = params;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::quantize_model;
    use crate::Activation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn golden_minimal_image() {
        // L = 1, C = 1, one input axis, one step
        let a = Architecture::new(1, 1, 1, 1, 1).unwrap();
        let mut m = GruMlp::<f32>::zeros(a);
        m.norm_mean = vec![0.5];
        m.norm_inv_std = vec![2.0];
        // w_ar = 1, w_hr = -0.5, all others zero; b2 = 0.25
        m.params.layers[0].w_ar.data_mut()[0] = 1.0;
        m.params.layers[0].w_hr.data_mut()[0] = -0.5;
        m.params.mlp.b2 = vec![0.25];
        let q = quantize_model(&m, InputScales::new(2.0, 1.0, 0.5).unwrap()).unwrap();
        let img = export_rodata(&q);
        let s = (2.0f64 / 255.0) as f32;
        let s_half = (2.0f64 / 255.0 * 0.5) as f32;
        let mut want: Vec<u8> = b"KDQ7".to_vec();
        want.extend([1, 0, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0]);
        for v in [2.0f32, 1.0, 0.5, 0.5, 2.0] {
            want.extend(v.to_le_bytes());
        }
        // w_ar: round(127.5) saturates to 127; w_hr: round(-127.5) = -128
        want.extend(s.to_le_bytes());
        want.push(127);
        want.extend(s_half.to_le_bytes());
        want.push(0x80);
        for _ in 0..4 {
            want.extend(1.0f32.to_le_bytes());
            want.push(0);
        }
        want.extend([0u8; 24]);
        // mlp_hidden = floor((1 + 1) / 2) = 1
        want.extend(1.0f32.to_le_bytes());
        want.push(0);
        want.extend([0u8; 4]);
        want.extend(1.0f32.to_le_bytes());
        want.push(0);
        want.extend(0.25f32.to_le_bytes());
        assert_eq!(img, want);
        assert_eq!(img.len(), q7_image_size(&a));
        assert_eq!(import_rodata(&img).unwrap(), q);
    }

    #[test]
    fn sizes_and_ratio() {
        for (l, fp32) in [(32usize, 16_708usize), (64, 62_020)] {
            let a = Architecture::new(1, l, 3, 256, 3).unwrap();
            assert_eq!(fp32_image_size(&a), fp32);
            let ratio = q7_image_size(&a) as f64 / fp32 as f64;
            assert!(ratio <= 0.30, "L={l}: {ratio}");
        }
        let a = Architecture::new(1, 32, 3, 256, 3).unwrap();
        assert_eq!(q7_image_size(&a), 4887);
        let m = GruMlp::<f32>::init(a, 1);
        assert_eq!(export_fp32_rodata(&m).len(), 16_708);
        assert_eq!(export_rodata(&quantize_model(&m, InputScales::default()).unwrap()).len(), 4887);
    }

    #[test]
    fn rejects_corrupt_images() {
        let a = Architecture::new(1, 2, 3, 4, 3).unwrap();
        let q = quantize_model(&GruMlp::<f32>::init(a, 1), InputScales::default()).unwrap();
        let img = export_rodata(&q);
        assert!(import_rodata(&img[..img.len() - 1]).is_err());
        let mut extra = img.clone();
        extra.push(0);
        assert!(import_rodata(&extra).is_err());
        let mut bad = img.clone();
        bad[0] = b'X';
        assert!(import_rodata(&bad).is_err());
        assert!(import_fp32_rodata(&img).is_err());
    }

    #[test]
    fn fp32_round_trip() {
        let a = Architecture::new(2, 5, 3, 4, 3).unwrap();
        let mut m = GruMlp::<f32>::init(a, 6);
        m.norm_mean = vec![0.1, 0.2, -0.3];
        let back = import_fp32_rodata(&export_fp32_rodata(&m)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.norm_mean, m.norm_mean);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_preserves_outputs(seed in any::<u64>(), layers in 1usize..=2, l in 1usize..6) {
            let a = Architecture::new(layers, l, 3, 6, 3).unwrap();
            let mut m = GruMlp::<f32>::init(a, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in m.params.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.random_range(-0.5f32..0.5);
                }
            }
            let q = quantize_model(&m, InputScales::from_exponents(rng.random_range(-3..=3), 0, 1)).unwrap();
            let back = import_rodata(&export_rodata(&q)).unwrap();
            for _ in 0..4 {
                let w: Vec<f32> = (0..18).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                let x = q.q_forward(&w).unwrap();
                let y = back.q_forward(&w).unwrap();
                prop_assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert_eq!(q.q_forward_with(&w, Activation::Exact).unwrap(), back.q_forward_with(&w, Activation::Exact).unwrap());
            }
        }
    }
}
