//! Python module `tardis`: datasets, similarity, selection, metrics and
//! full pipeline runs. Structured results come back as plain dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use tardis_core::ceg::{class_similarity, select_ambiguous_classes};
use tardis_core::corpus::{load_dataset, sample_seed, write_dataset, DatasetFormat, LabeledExample};
use tardis_core::embedding::{cosine, Embedder, EmbeddingVector};
use tardis_core::llm::parse_enumerated_items;
use tardis_core::metrics::{aps_report, nearest_centroid_eval};
use tardis_core::pipeline::{resume_stage, run_full_pipeline, RunConfig, Stage};

create_exception!(tardis, TardisError, PyException);
create_exception!(tardis, ConfigError, TardisError);

fn err(e: tardis_core::Error) -> PyErr {
    if e.is_config() {
        ConfigError::new_err(e.to_string())
    } else {
        TardisError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| TardisError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "LabeledExample", module = "tardis", from_py_object)]
#[derive(Clone)]
pub struct PyLabeledExample {
    #[pyo3(get)]
    id: String,
    #[pyo3(get)]
    text: String,
    #[pyo3(get)]
    label: String,
}

#[pymethods]
impl PyLabeledExample {
    #[new]
    #[pyo3(signature = (text, label, id=None))]
    fn new(text: String, label: String, id: Option<String>) -> Self {
        let id = id.unwrap_or_else(|| tardis_core::corpus::derive_id(0, &text, &label));
        PyLabeledExample { id, text, label }
    }

    fn __repr__(&self) -> String {
        format!("LabeledExample(id={:?}, text={:?}, label={:?})", self.id, self.text, self.label)
    }
}

impl From<&LabeledExample> for PyLabeledExample {
    fn from(e: &LabeledExample) -> Self {
        PyLabeledExample {
            id: e.id.clone(),
            text: e.text.clone(),
            label: e.label.clone(),
        }
    }
}

/// A labeled text collection with a fixed class order.
#[pyclass(name = "Dataset", module = "tardis")]
pub struct PyDataset {
    inner: tardis_core::corpus::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from `(text, label)` pairs.
    #[new]
    #[pyo3(signature = (rows, name="dataset"))]
    fn new(rows: Vec<(String, String)>, name: &str) -> PyResult<Self> {
        let examples = rows
            .iter()
            .enumerate()
            .map(|(i, (t, l))| LabeledExample::new(tardis_core::corpus::derive_id(i, t, l), t.clone(), l.clone()))
            .collect();
        Ok(PyDataset {
            inner: tardis_core::corpus::Dataset::new(name, examples).map_err(err)?,
        })
    }

    /// Loads JSONL or CSV, picked by extension unless `format` is given.
    #[staticmethod]
    #[pyo3(signature = (path, format=None))]
    fn load(path: PathBuf, format: Option<&str>) -> PyResult<Self> {
        let format = match format {
            Some(f) => f.parse().map_err(err)?,
            None => DatasetFormat::from_path(&path),
        };
        Ok(PyDataset {
            inner: load_dataset(&path, format).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes().to_vec()
    }

    fn examples(&self) -> Vec<PyLabeledExample> {
        self.inner.examples().iter().map(Into::into).collect()
    }

    /// Seeded `shots`-per-class sample.
    #[pyo3(signature = (shots, rng_seed=0))]
    fn sample_seed(&self, shots: usize, rng_seed: u64) -> PyResult<PyDataset> {
        let selection = sample_seed(&self.inner, shots, rng_seed).map_err(err)?;
        Ok(PyDataset {
            inner: selection.apply(&self.inner).renamed("seed"),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, examples={}, classes={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.classes().len()
        )
    }
}

/// Cosine similarity of two raw vectors.
#[pyfunction(name = "cosine")]
fn py_cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = EmbeddingVector::new(a, "python", "raw").map_err(err)?;
    let b = EmbeddingVector::new(b, "python", "raw").map_err(err)?;
    cosine(&a, &b).map_err(err)
}

/// Local embedding of `text`.
#[pyfunction]
fn embed(text: &str) -> PyResult<Vec<f64>> {
    Ok(Embedder::local().embed_one(text).map_err(err)?.values().to_vec())
}

/// Class similarity matrix as `{"classes": [...], "values": [[...]]}`.
#[pyfunction(name = "class_similarity")]
fn py_class_similarity<'py>(py: Python<'py>, seed: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let sim = class_similarity(&seed.inner, &Embedder::local()).map_err(err)?;
    to_py(py, &sim)
}

/// The `n` classes most similar to `target`, with their scores.
#[pyfunction(name = "select_ambiguous_classes")]
#[pyo3(signature = (seed, target, n=5))]
fn py_select_ambiguous(seed: &PyDataset, target: &str, n: usize) -> PyResult<Vec<(String, f64)>> {
    let sim = class_similarity(&seed.inner, &Embedder::local()).map_err(err)?;
    let set = select_ambiguous_classes(&sim, target, n).map_err(err)?;
    Ok(set.members)
}

/// Intra- and inter-class average pairwise similarity.
#[pyfunction(name = "aps_report")]
#[pyo3(signature = (dataset, tag="dataset"))]
fn py_aps_report<'py>(py: Python<'py>, dataset: &PyDataset, tag: &str) -> PyResult<Bound<'py, PyAny>> {
    let report = aps_report(dataset.inner.examples(), &Embedder::local(), tag).map_err(err)?;
    to_py(py, &report)
}

/// Nearest-centroid accuracy of `train` on `test`.
#[pyfunction(name = "nearest_centroid_eval")]
fn py_nearest_centroid_eval<'py>(py: Python<'py>, train: &PyDataset, test: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let report = nearest_centroid_eval(train.inner.examples(), test.inner.examples(), &Embedder::local()).map_err(err)?;
    to_py(py, &report)
}

/// Items of a numbered or bulleted LLM reply, at most `k`.
#[pyfunction(name = "parse_enumerated_items")]
fn py_parse_enumerated_items(raw: &str, k: usize) -> Vec<String> {
    parse_enumerated_items(raw, k)
}

/// Default run configuration as a dict keyed by config field.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &RunConfig::default())
}

/// Full pipeline run. `config` is a TOML file; `config_toml` inline TOML.
/// Returns the manifest.
#[pyfunction]
#[pyo3(signature = (dataset_path, run_dir, config=None, config_toml=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    dataset_path: PathBuf,
    run_dir: PathBuf,
    config: Option<PathBuf>,
    config_toml: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match (config, config_toml) {
        (Some(_), Some(_)) => return Err(ConfigError::new_err("pass either config or config_toml, not both")),
        (Some(path), None) => RunConfig::load(&path).map_err(err)?,
        (None, Some(text)) => RunConfig::from_toml_str(text).map_err(err)?,
        (None, None) => RunConfig::default(),
    };
    let manifest = py
        .detach(|| run_full_pipeline(&cfg, &dataset_path, &run_dir))
        .map_err(err)?;
    to_py(py, &manifest)
}

/// Re-runs `run_dir` from `stage` onward. Returns the manifest.
#[pyfunction]
fn resume<'py>(py: Python<'py>, run_dir: PathBuf, stage: &str) -> PyResult<Bound<'py, PyAny>> {
    let stage: Stage = stage.parse().map_err(err)?;
    let manifest = py.detach(|| resume_stage(&run_dir, stage)).map_err(err)?;
    to_py(py, &manifest)
}

#[pymodule]
pub fn tardis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("TardisError", py.get_type::<TardisError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("OOD_LABEL", tardis_core::OOD_LABEL)?;
    m.add_class::<PyLabeledExample>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(py_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(py_class_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(py_select_ambiguous, m)?)?;
    m.add_function(wrap_pyfunction!(py_aps_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_nearest_centroid_eval, m)?)?;
    m.add_function(wrap_pyfunction!(py_parse_enumerated_items, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(resume, m)?)?;
    Ok(())
}
