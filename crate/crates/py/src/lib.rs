//! Python bindings. Matrices cross the boundary as lists of rows; reports
//! come back as plain dicts.

use std::path::PathBuf;

use harpeft_core::data::{generate_synthetic, load_corpus, lodo_folds, DatasetBundle, SyntheticSpec};
use harpeft_core::eval::{
    self, derive_seed, finetune_on_target, measure_memory, pretrain_backbone, run_lodo, ExperimentConfig,
};
use harpeft_core::finetune::{FineTuneModel, Strategy};
use harpeft_core::io;
use harpeft_core::model::{Encoder, Module};
use harpeft_core::numerics::{Matrix, Purpose, Rng, Tape};
use harpeft_core::peft::QuantizedMatrix;
use harpeft_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::UnknownDomain { .. } | Error::StrategyMismatch { .. } | Error::Toml(_) | Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Serializes through JSON so nested reports arrive as dicts and lists.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_strategy(s: &str) -> PyResult<Strategy> {
    s.parse().map_err(py_err)
}

/// Experiment configuration. Built from TOML text; unspecified fields keep
/// their defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml_text = ""))]
    fn new(toml_text: &str) -> PyResult<Self> {
        let inner = toml::from_str(toml_text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

/// One preprocessed domain: 50 Hz, z-normalized, windowed.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DatasetBundle,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocabulary.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn window(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, String)> {
        let w = self
            .inner
            .windows
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("window {i} out of range")))?;
        Ok((to_rows(&w.values), w.activity.clone()))
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, windows={}, classes={})", self.inner.name, self.inner.len(), self.inner.n_classes())
    }
}

fn wrap_datasets(bundles: Vec<DatasetBundle>) -> Vec<PyDataset> {
    bundles.into_iter().map(|inner| PyDataset { inner }).collect()
}

fn bundles(datasets: &[PyDataset]) -> Vec<DatasetBundle> {
    datasets.iter().map(|d| d.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (n_domains = 5, n_classes = 6, seed = 0))]
fn synthetic(n_domains: usize, n_classes: usize, seed: u64) -> PyResult<Vec<PyDataset>> {
    Ok(wrap_datasets(generate_synthetic(&SyntheticSpec::separable(n_domains, n_classes, seed)).map_err(py_err)?))
}

#[pyfunction]
fn load_manifest(path: PathBuf) -> PyResult<Vec<PyDataset>> {
    Ok(wrap_datasets(load_corpus(&path).map_err(py_err)?))
}

/// Transformer encoder backbone.
#[pyclass(name = "Encoder", from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: Encoder,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn random(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let inner = Encoder::new(&config.inner.model, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_encoder(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_encoder(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Token embeddings for each window, stacked as `(B·T) × d` rows.
    fn encode(&self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let ms = windows.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        let mut tape = Tape::new();
        let out = self.inner.forward_windows(&mut tape, &ms.iter().collect::<Vec<_>>()).map_err(py_err)?;
        Ok(to_rows(tape.value(out)))
    }
}

/// MAE-pretrains on every dataset except `held_out`. Returns the encoder and
/// per-epoch reconstruction losses.
#[pyfunction]
fn pretrain(datasets: Vec<PyDataset>, held_out: &str, config: &PyConfig) -> PyResult<(PyEncoder, Vec<f64>)> {
    let bs = bundles(&datasets);
    let idx = bs.iter().position(|b| b.name == held_out).ok_or_else(|| {
        py_err(Error::UnknownDomain {
            name: held_out.into(),
            available: bs.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(", "),
        })
    })?;
    let fold = lodo_folds(&bs).map_err(py_err)?.swap_remove(idx);
    let (inner, log) = pretrain_backbone(&fold.pretrain, &config.inner, idx as u32).map_err(py_err)?;
    Ok((PyEncoder { inner }, log.epoch_losses))
}

/// A backbone with a classification head, prepared for one strategy.
#[pyclass(name = "FineTuned", from_py_object)]
#[derive(Clone)]
struct PyFineTuned {
    inner: FineTuneModel,
}

#[pymethods]
impl PyFineTuned {
    fn predict(&self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<usize>> {
        let ms = windows.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        self.inner.predict(&ms.iter().collect::<Vec<_>>(), 32).map_err(py_err)
    }

    /// `(trainable, total)` parameter counts.
    fn parameters(&self) -> (usize, usize) {
        eval::count_parameters(&self.inner)
    }

    fn memory<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &measure_memory(&self.inner).map_err(py_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_model(&path, &self.inner).map_err(py_err)
    }
}

/// Fine-tunes `encoder` on a stratified `fraction` of `target` and scores
/// the rest. Returns the model and its metrics.
#[pyfunction]
#[pyo3(signature = (encoder, target, strategy, config, fraction = 0.7))]
fn finetune<'py>(
    py: Python<'py>,
    encoder: &PyEncoder,
    target: &PyDataset,
    strategy: &str,
    config: &PyConfig,
    fraction: f64,
) -> PyResult<(PyFineTuned, Bound<'py, PyAny>)> {
    let s = parse_strategy(strategy)?;
    let mut tc = config.inner.train_config(s, 0);
    tc.train_fraction = fraction;
    let split_seed = derive_seed(config.inner.seed, Purpose::Split, 0);
    let run = finetune_on_target(&encoder.inner, &target.inner, fraction, split_seed, &tc).map_err(py_err)?;
    let metrics = to_py(py, &run.metrics)?;
    Ok((PyFineTuned { inner: run.model }, metrics))
}

/// Leave-one-dataset-out over all datasets; one dict per fold and strategy.
#[pyfunction]
fn lodo<'py>(py: Python<'py>, datasets: Vec<PyDataset>, strategies: Vec<String>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let ss = strategies.iter().map(|s| parse_strategy(s)).collect::<PyResult<Vec<_>>>()?;
    let records = run_lodo(&bundles(&datasets), &ss, &config.inner).map_err(py_err)?;
    to_py(py, &records)
}

/// Accuracy and macro metrics from predicted and true class ids.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, preds: Vec<usize>, labels: Vec<usize>, n_classes: usize) -> PyResult<Bound<'py, PyAny>> {
    let cm = eval::confusion(&preds, &labels, n_classes).map_err(py_err)?;
    to_py(py, &eval::metrics(&cm).map_err(py_err)?)
}

/// NF4 quantize-dequantize round trip; returns the reconstructed rows and
/// the stored byte count.
#[pyfunction]
#[pyo3(signature = (rows, block_size = 64, double_quant = true))]
fn nf4_roundtrip(rows: Vec<Vec<f64>>, block_size: usize, double_quant: bool) -> PyResult<(Vec<Vec<f64>>, usize)> {
    let q = QuantizedMatrix::quantize(&to_matrix(rows)?, block_size, double_quant).map_err(py_err)?;
    let back = q.dequantize().map_err(py_err)?;
    Ok((to_rows(&back), q.storage_bytes().total()))
}

#[pymodule]
fn harpeft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyFineTuned>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(lodo, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(nf4_roundtrip, m)?)?;
    Ok(())
}
