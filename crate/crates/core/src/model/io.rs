//! JSON persistence for float models.
//!
//! Tensors are written either as base64 of little-endian IEEE-754 `f32`
//! (the canonical, lossless form) or as plain nested arrays for humans.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Architecture, GruMlpModel, Params};
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub(crate) const FLOAT_MODEL_KIND: &str = "gru_mlp_f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorEncoding {
    #[default]
    Base64F32le,
    Nested,
}

/// On-disk form of a float model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub kind: String,
    pub encoding: TensorEncoding,
    pub arch: Architecture,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub norm_mean: Value,
    pub norm_inv_std: Value,
    pub tensors: BTreeMap<String, Value>,
}

pub(crate) fn encode_f32(data: &[f32], shape: &[usize], enc: TensorEncoding) -> Value {
    match enc {
        TensorEncoding::Base64F32le => {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            json!({ "shape": shape, "data": B64.encode(bytes) })
        }
        TensorEncoding::Nested => match shape {
            [_, cols] => Value::Array(data.chunks(*cols).map(|row| json!(row)).collect()),
            _ => json!(data),
        },
    }
}

pub(crate) fn decode_f32(v: &Value, shape: &[usize], enc: TensorEncoding, name: &str) -> Result<Vec<f32>> {
    let expected: usize = shape.iter().product();
    let bad = |msg: &str| Error::DataContract(format!("tensor {name}: {msg}"));
    let out = match enc {
        TensorEncoding::Base64F32le => {
            let stored_shape: Vec<usize> = serde_json::from_value(v.get("shape").cloned().ok_or_else(|| bad("missing shape"))?)?;
            if stored_shape != shape {
                return Err(bad(&format!("shape {stored_shape:?}, expected {shape:?}")));
            }
            let text = v.get("data").and_then(Value::as_str).ok_or_else(|| bad("missing data"))?;
            let bytes = B64.decode(text).map_err(|e| bad(&e.to_string()))?;
            if bytes.len() != expected * 4 {
                return Err(bad(&format!("{} bytes, expected {}", bytes.len(), expected * 4)));
            }
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        }
        TensorEncoding::Nested => {
            let flat: Vec<f32> = match shape {
                [rows, _] => {
                    let rows_v: Vec<Vec<f32>> = serde_json::from_value(v.clone())?;
                    if rows_v.len() != *rows {
                        return Err(bad(&format!("{} rows, expected {rows}", rows_v.len())));
                    }
                    rows_v.into_iter().flatten().collect()
                }
                _ => serde_json::from_value(v.clone())?,
            };
            flat
        }
    };
    if out.len() != expected {
        return Err(bad(&format!("{} values, expected {expected}", out.len())));
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok(out)
}

/// Shapes of every tensor in canonical order.
pub(crate) fn tensor_shapes(arch: &Architecture) -> Vec<Vec<usize>> {
    let l = arch.hidden_size();
    let mut shapes = Vec::new();
    for i in 0..arch.num_gru_layers() {
        let d = arch.layer_input_dim(i);
        for (k, _) in super::LAYER_TENSORS.iter().enumerate() {
            shapes.push(match k {
                0 | 2 | 4 => vec![l, d],
                1 | 3 | 5 => vec![l, l],
                _ => vec![l],
            });
        }
    }
    let m = arch.mlp_hidden();
    let c = arch.num_classes();
    shapes.extend([vec![m, l], vec![m], vec![c, m], vec![c]]);
    shapes
}

/// Rebuilds parameters from flat tensors given in canonical order.
pub(crate) fn params_from_flat(arch: &Architecture, mut flat: Vec<Vec<f32>>) -> Result<Params<f32>> {
    let shapes = tensor_shapes(arch);
    if flat.len() != shapes.len() {
        return Err(Error::shape("wrong number of tensors"));
    }
    let mut params = Params::<f32>::zeros(arch);
    for ((dst, src), shape) in params.tensors_mut().into_iter().zip(flat.iter_mut()).zip(&shapes) {
        if src.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("tensor of shape {shape:?} given {} values", src.len())));
        }
        dst.copy_from_slice(src);
    }
    Ok(params)
}

impl GruMlpModel {
    pub fn to_document(&self, enc: TensorEncoding) -> ModelDocument {
        let names = Params::<f32>::tensor_names(self.arch.num_gru_layers());
        let shapes = tensor_shapes(&self.arch);
        let tensors = names
            .into_iter()
            .zip(self.params.tensors())
            .zip(&shapes)
            .map(|((n, t), s)| (n, encode_f32(t, s, enc)))
            .collect();
        let d = [self.arch.input_dim()];
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            kind: FLOAT_MODEL_KIND.into(),
            encoding: enc,
            arch: self.arch,
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
            norm_mean: encode_f32(&self.norm_mean, &d, enc),
            norm_inv_std: encode_f32(&self.norm_inv_std, &d, enc),
            tensors,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.kind != FLOAT_MODEL_KIND {
            return Err(Error::DataContract(format!("expected a {FLOAT_MODEL_KIND} model, found {}", doc.kind)));
        }
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::DataContract(format!("unsupported model format version {}", doc.format_version)));
        }
        let arch = doc.arch;
        let names = Params::<f32>::tensor_names(arch.num_gru_layers());
        let shapes = tensor_shapes(&arch);
        if doc.tensors.len() != names.len() {
            return Err(Error::DataContract(format!(
                "model has {} tensors, architecture needs {}",
                doc.tensors.len(),
                names.len()
            )));
        }
        let flat = names
            .iter()
            .zip(&shapes)
            .map(|(n, s)| {
                let v = doc.tensors.get(n).ok_or_else(|| Error::DataContract(format!("missing tensor {n}")))?;
                decode_f32(v, s, doc.encoding, n)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = [arch.input_dim()];
        let model = GruMlpModel {
            arch,
            class_names: doc.class_names.clone(),
            norm_mean: decode_f32(&doc.norm_mean, &d, doc.encoding, "norm_mean")?,
            norm_inv_std: decode_f32(&doc.norm_inv_std, &d, doc.encoding, "norm_inv_std")?,
            params: params_from_flat(&arch, flat)?,
            metadata: doc.metadata.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json_string(&self, enc: TensorEncoding) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document(enc))?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        Self::from_document(&doc)
    }

    pub fn save_json(&self, path: impl AsRef<Path>, enc: TensorEncoding) -> Result<()> {
        std::fs::write(path, self.to_json_string(enc)? + "\n")?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
