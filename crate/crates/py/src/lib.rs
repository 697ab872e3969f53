//! Python bindings: datasets, float and quantized models, training,
//! cross-validation and the fixed-point primitives.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use kdq7::data::{load_dataset, save_dataset, synth_gen, SynthConfig};
use kdq7::evaluation::{cross_validate, CvConfig, Variant};
use kdq7::fxp;
use kdq7::metrics::{mcc_multiclass, ConfusionMatrix};
use kdq7::model::{ArchSpec, TensorEncoding};
use kdq7::qmodel::{quantize_model, tune_input_scales, InputScales};
use kdq7::rodata::export_rodata;
use kdq7::training::{train as train_model, TrainConfig};
use kdq7::{activations, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: kdq7::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, num_classes = 3))]
    fn load(path: &str, num_classes: usize) -> PyResult<Self> {
        Ok(Self { inner: load_dataset(path, num_classes).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (animals = 8, windows = 50, seq_len = 64, seed = 0))]
    fn synthetic(animals: usize, windows: usize, seq_len: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig { num_animals: animals, windows_per_animal: windows, sequence_length: seq_len, seed };
        Ok(Self { inner: synth_gen(&cfg).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn sequence_length(&self) -> usize {
        self.inner.sequence_length()
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.ids()
    }

    fn animals(&self) -> Vec<String> {
        self.inner.animals()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.datapoints().iter().map(|p| p.label).collect()
    }

    fn class_histogram(&self) -> Vec<usize> {
        self.inner.class_histogram()
    }

    /// Flattened samples of datapoint `id`.
    fn window(&self, id: u64) -> PyResult<Vec<f32>> {
        self.inner.get(id).map(|p| p.samples.clone()).ok_or_else(|| PyValueError::new_err(format!("no datapoint {id}")))
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: kdq7::GruMlpModel,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model, e.g. `Model.init("gru(1,32)", 3, 64, 3)`.
    #[staticmethod]
    #[pyo3(signature = (arch, num_classes, seq_len, input_dim = 3, seed = 0))]
    fn init(arch: &str, num_classes: usize, seq_len: usize, input_dim: usize, seed: u64) -> PyResult<Self> {
        let spec: ArchSpec = arch.parse().map_err(py_err)?;
        let a = spec.build(num_classes, seq_len, input_dim).map_err(py_err)?;
        Ok(Self { inner: kdq7::GruMlp::init(a, seed) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: kdq7::GruMlpModel::load_json(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path, TensorEncoding::Base64F32le).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.spec().to_string()
    }

    fn count_params(&self) -> usize {
        self.inner.arch.count_params()
    }

    fn count_mults(&self) -> u64 {
        self.inner.arch.count_mults()
    }

    /// Logits with exact activations, or approximate ones if `approx`.
    #[pyo3(signature = (window, approx = false))]
    fn forward(&self, window: Vec<f32>, approx: bool) -> PyResult<Vec<f32>> {
        let act = if approx { kdq7::Activation::Approx } else { kdq7::Activation::Exact };
        self.inner.forward_with(&window, act).map_err(py_err)
    }

    fn predict(&self, window: Vec<f32>) -> PyResult<usize> {
        self.inner.predict(&window).map_err(py_err)
    }

    #[pyo3(signature = (sa = 1.0, sh = 1.0, sm = 1.0))]
    fn quantize(&self, sa: f32, sh: f32, sm: f32) -> PyResult<PyQuantizedModel> {
        let scales = InputScales::new(sa, sh, sm).map_err(py_err)?;
        Ok(PyQuantizedModel { inner: quantize_model(&self.inner, scales).map_err(py_err)? })
    }

    /// Quantizes with input scales tuned on `data`; returns the model and
    /// the tuning report.
    fn quantize_tuned<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<(PyQuantizedModel, Bound<'py, PyAny>)> {
        let calib: Vec<(&[f32], usize)> = data.inner.datapoints().iter().map(|p| (&p.samples[..], p.label)).collect();
        let report = tune_input_scales(&self.inner, &calib).map_err(py_err)?;
        let q = quantize_model(&self.inner, report.scales).map_err(py_err)?;
        Ok((PyQuantizedModel { inner: q }, to_py(py, &report)?))
    }
}

#[pyclass(name = "QuantizedModel", frozen)]
struct PyQuantizedModel {
    inner: kdq7::QuantizedGruMlpModel,
}

#[pymethods]
impl PyQuantizedModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: kdq7::QuantizedGruMlpModel::load_json(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path).map_err(py_err)
    }

    #[getter]
    fn scales(&self) -> (f32, f32, f32) {
        let s = self.inner.scales();
        (s.s_a, s.s_h, s.s_m)
    }

    fn forward(&self, window: Vec<f32>) -> PyResult<Vec<f32>> {
        self.inner.q_forward(&window).map_err(py_err)
    }

    fn predict(&self, window: Vec<f32>) -> PyResult<usize> {
        self.inner.predict(&window).map_err(py_err)
    }

    fn dequantize(&self) -> PyModel {
        PyModel { inner: self.inner.dequantize() }
    }

    /// Packed Q7 weight image.
    fn rodata<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &export_rodata(&self.inner))
    }
}

#[pyfunction]
#[pyo3(signature = (data, arch = "gru(1,16)", epochs = 30, lr = 1e-3, batch_size = 32, seed = 0))]
fn train(data: &PyDataset, arch: &str, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<PyModel> {
    let spec: ArchSpec = arch.parse().map_err(py_err)?;
    let cfg = TrainConfig { epochs, learning_rate: lr, batch_size, seed, ..Default::default() };
    let out = train_model(&data.inner, &data.inner.ids(), &[], spec, &cfg, None).map_err(py_err)?;
    Ok(PyModel { inner: out.model })
}

/// Leave-one-animal-out cross-validation; `kd` lists variants among
/// "none", "teacher" and "self". Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (data, arch = "gru(1,8)", teacher_arch = "gru(1,32)", kd = vec!["none".to_string()], epochs = 30, lr = 1e-3, seed = 0, quantize = false))]
#[allow(clippy::too_many_arguments)]
fn loao<'py>(
    py: Python<'py>,
    data: &PyDataset,
    arch: &str,
    teacher_arch: &str,
    kd: Vec<String>,
    epochs: usize,
    lr: f64,
    seed: u64,
    quantize: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let variants = kd
        .iter()
        .map(|k| match k.as_str() {
            "none" => Ok(Variant::NoKd),
            "teacher" => Ok(Variant::Kd),
            "self" => Ok(Variant::SelfKd),
            other => Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let tc = TrainConfig { epochs, learning_rate: lr, seed, ..Default::default() };
    let cfg = CvConfig {
        student: arch.parse().map_err(py_err)?,
        teacher: teacher_arch.parse().map_err(py_err)?,
        train: tc,
        teacher_train: tc,
        variants,
        quantize,
        ..Default::default()
    };
    let report = py.detach(|| cross_validate(&data.inner, &cfg)).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn tanh_approx(x: f64) -> f64 {
    activations::tanh_approx(x)
}

#[pyfunction]
fn sigmoid_approx(x: f64) -> f64 {
    activations::sigmoid_approx(x)
}

/// Multiclass MCC of a square confusion matrix (rows true, columns predicted).
#[pyfunction]
fn mcc(confusion: Vec<Vec<u64>>) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_counts(confusion).map_err(py_err)?;
    mcc_multiclass(&cm).map_err(py_err)
}

/// Saturating Q7 matrix-vector product of int8 data.
#[pyfunction]
fn q7_matvec(rows: usize, cols: usize, matrix: Vec<i8>, x: Vec<i8>) -> PyResult<Vec<i8>> {
    let a = fxp::Q7Matrix::from_parts(rows, cols, matrix, 1.0).map_err(py_err)?;
    let y = fxp::q7_matvec(&a, &fxp::Q7Vector::new(x)).map_err(py_err)?;
    Ok(y.into_inner())
}

#[pymodule]
#[pyo3(name = "kdq7")]
fn kdq7_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyQuantizedModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(loao, m)?)?;
    m.add_function(wrap_pyfunction!(tanh_approx, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_approx, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(q7_matvec, m)?)?;
    Ok(())
}
