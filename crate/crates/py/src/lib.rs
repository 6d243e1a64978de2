//! Python bindings: configuration, simulation, training, evaluation and
//! inference. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use cgnn_core::bench::{bench as run_bench, BenchConfig};
use cgnn_core::graph::knn_graph_points;
use cgnn_core::io::{self, RunConfig};
use cgnn_core::model::{predict as model_predict, ModelConfig, ModelWeights};
use cgnn_core::msm::force_schedule as msm_force_schedule;
use cgnn_core::pipeline::{evaluate_runs, init_weights, train_on_runs, SplitName};
use cgnn_core::train::TrainMode;
use cgnn_core::types::{Condition, PointCloud};
use cgnn_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::BlowUp { .. } | Error::NotConverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Full run configuration (simulator, data, split, model, training).
#[pyclass(name = "RunConfig", module = "cgnn", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (preset = "full"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::preset(preset).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::from_toml_str(text).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Returns a copy with dotted `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig { inner: self.inner.with_overrides(&overrides).map_err(py_err)? })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, grid_n={}, n_locations={}, epochs={})",
            self.inner.seed, self.inner.msm.grid_n, self.inner.msm.n_locations, self.inner.train.epochs
        )
    }
}

/// Trained or freshly initialised network weights with their layout.
#[pyclass(name = "Model", module = "cgnn")]
struct PyModel {
    config: ModelConfig,
    weights: ModelWeights<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (manifest, weights) = io::load_model(&path).map_err(py_err)?;
        Ok(PyModel { config: manifest.model, weights })
    }

    /// Weights drawn from the config's training seed.
    #[staticmethod]
    fn init(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PyModel { config: config.inner.model.clone(), weights: init_weights(&config.inner).map_err(py_err)? })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.weights.num_parameters()
    }

    /// `(deformed points, force change)` for an `N × 3` cloud in mm and a
    /// 6-value indenter condition (start, end).
    fn predict(&self, py: Python<'_>, points: Vec<[f64; 3]>, condition: Vec<f64>) -> PyResult<(Vec<[f64; 3]>, f64)> {
        let cloud = PointCloud::new(points).map_err(py_err)?;
        let condition = Condition::from_slice(&condition).map_err(py_err)?;
        let (deformed, force) =
            py.detach(|| model_predict(&cloud, &condition, &self.weights, &self.config)).map_err(py_err)?;
        Ok((deformed.into_points(), force))
    }
}

/// Simulates the configured dataset into `path` and returns the summary.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &PyRunConfig, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let header = config.inner.dataset_header().map_err(py_err)?;
    let summary = py.detach(|| io::simulate_to_file(&path, &header)).map_err(py_err)?;
    to_py(py, &summary)
}

/// Trains on a dataset file (continuing from `init` when given), writes the
/// best checkpoint to `out` and returns the epoch history.
#[pyfunction]
#[pyo3(signature = (config, dataset, out, init = None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    dataset: PathBuf,
    out: PathBuf,
    init: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config.inner.clone();
    let history = py
        .detach(|| -> Result<_, Error> {
            let (_, hash, runs) = io::read_dataset(&dataset)?;
            let weights = match &init {
                Some(p) => {
                    let (manifest, w) = io::load_model(p)?;
                    cfg.model = manifest.model;
                    cfg.train.mode = TrainMode::Finetune;
                    Some(w)
                }
                None => None,
            };
            let (outcome, manifest) = train_on_runs(&runs, &hash, &cfg, weights.as_ref(), |_| {})?;
            io::save_model(&out, &outcome.best, &manifest)?;
            Ok(outcome.history)
        })
        .map_err(py_err)?;
    to_py(py, &history)
}

/// Metrics on one split of a dataset file; the zero-motion baseline when
/// no checkpoint is given.
#[pyfunction]
#[pyo3(signature = (config, dataset, checkpoint = None, split = "test"))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    dataset: PathBuf,
    checkpoint: Option<PathBuf>,
    split: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let which: SplitName = split.parse().map_err(py_err)?;
    let mut cfg = config.inner.clone();
    let metrics = py
        .detach(|| -> Result<_, Error> {
            let (_, hash, runs) = io::read_dataset(&dataset)?;
            let weights = match &checkpoint {
                Some(p) => {
                    let (manifest, w) = io::load_model(p)?;
                    if manifest.dataset_hash != hash {
                        return Err(Error::HashMismatch { expected: manifest.dataset_hash, found: hash });
                    }
                    cfg.model = manifest.model;
                    Some(w)
                }
                None => None,
            };
            evaluate_runs(&runs, &cfg, which, weights.as_ref())
        })
        .map_err(py_err)?;
    to_py(py, &metrics)
}

/// Times one simulated force step against inference with `model`.
#[pyfunction]
#[pyo3(name = "bench", signature = (config, model, repetitions = 20, markers_per_side = 5))]
fn benchmark<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    model: &PyModel,
    repetitions: usize,
    markers_per_side: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = BenchConfig { repetitions, location: None, markers_per_side };
    let report = py.detach(|| run_bench(&config.inner.msm, &model.weights, &model.config, &cfg)).map_err(py_err)?;
    to_py(py, &report)
}

/// Per-mass force at each ramp step, N.
#[pyfunction]
fn force_schedule(config: &PyRunConfig) -> Vec<f64> {
    msm_force_schedule(&config.inner.msm)
}

/// Neighbour lists of the k-nearest-neighbour graph, self included.
#[pyfunction]
fn knn_graph(points: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let g = knn_graph_points(&points, k).map_err(py_err)?;
    Ok((0..g.num_nodes()).map(|i| g.neighbours(i).to_vec()).collect())
}

/// Header, config hash and every run of a dataset file.
#[pyfunction]
fn read_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let (header, hash, runs) = py.detach(|| io::read_dataset(&path)).map_err(py_err)?;
    #[derive(Serialize)]
    struct View<'a> {
        header: &'a io::DatasetHeader,
        config_hash: &'a str,
        runs: &'a [cgnn_core::msm::IndentationRun],
    }
    to_py(py, &View { header: &header, config_hash: &hash, runs: &runs })
}

#[pymodule]
fn cgnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(force_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(knn_graph, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add("PRESETS", io::PRESETS.to_vec())?;
    Ok(())
}
