//! Python bindings: scenarios, source pretraining, online adaptation,
//! reports, and the set kernels.
//!
//! Batches cross the boundary as lists of rows; reports come back as the
//! same JSON documents the CLI writes, decoded into Python objects.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctta_core::adaptation::{AdaptationConfig, Adapter as CoreAdapter};
use ctta_core::error::Error;
use ctta_core::harness::{self, BaselineKind, HarnessConfig, RunOptions};
use ctta_core::kernels::{self, EmbeddingSet, KernelConfig};
use ctta_core::model::{Checkpoint as CoreCheckpoint, Model};
use ctta_core::numerics::Tensor;
use ctta_core::stream::ScenarioConfig;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Toml(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn set(rows: &[Vec<f64>]) -> PyResult<EmbeddingSet> {
    let dim = rows.first().map_or(0, Vec::len);
    EmbeddingSet::from_rows(dim, rows, 0).map_err(py_err)
}

fn json_loads<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

fn config_or_default(config: Option<&Config>) -> HarnessConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

fn baseline(name: &str) -> PyResult<BaselineKind> {
    name.parse().map_err(py_err)
}

/// A stream definition: domains, schedule, held-out set and seed.
#[pyclass(module = "ctta", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Scenario {
            inner: ScenarioConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Scenario {
            inner: ScenarioConfig::from_file(&path).map_err(py_err)?,
        })
    }

    /// All five shift families at one severity.
    #[staticmethod]
    fn standard(severity: u8, batches: usize) -> Self {
        Scenario {
            inner: ScenarioConfig::standard(severity, batches),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        Scenario {
            inner: self.inner.with_seed(seed),
        }
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    /// `(inputs, labels, domain, change)` for every batch, in order.
    fn batches(&self) -> PyResult<Vec<(Vec<Vec<f64>>, Vec<usize>, String, bool)>> {
        self.inner
            .stream()
            .map_err(py_err)?
            .map(|item| {
                let item = item.map_err(py_err)?;
                Ok((
                    rows(&item.batch.inputs),
                    item.batch.labels,
                    item.domain.to_string(),
                    item.change,
                ))
            })
            .collect()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn total_batches(&self) -> usize {
        self.inner.total_batches()
    }
}

/// Model, pretraining and adaptation settings.
#[pyclass(module = "ctta", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: HarnessConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Config {
            inner: HarnessConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Config {
            inner: HarnessConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Config {
            inner: HarnessConfig::from_file(&path).map_err(py_err)?,
        })
    }
}

/// Source-model parameters plus the task seed they were fit on.
#[pyclass(module = "ctta", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: CoreCheckpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn source_error_pct(&self) -> Option<f64> {
        self.inner.source_error_pct
    }

    /// Class probabilities of the source model.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let model = Model::from_checkpoint(&self.inner).map_err(py_err)?;
        Ok(rows(&model.predict(&tensor(&x)?, false).map_err(py_err)?))
    }
}

/// Fit the source model on the scenario's clean task.
#[pyfunction]
#[pyo3(signature = (scenario, config = None))]
fn pretrain(scenario: &Scenario, config: Option<&Config>) -> PyResult<Checkpoint> {
    let cfg = config_or_default(config);
    let p = harness::pretrain_source(&scenario.inner.task, &cfg.model, &cfg.pretrain).map_err(py_err)?;
    Ok(Checkpoint {
        inner: p.checkpoint(),
    })
}

/// Online run; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, scenario, config = None, baseline = "full"))]
fn run<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    scenario: &Scenario,
    config: Option<&Config>,
    baseline: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_or_default(config);
    let b = self::baseline(baseline)?;
    let report = py
        .detach(|| harness::run_scenario(&checkpoint.inner, &scenario.inner, &cfg, b, RunOptions::default()))
        .map_err(py_err)?;
    json_loads(py, &report.to_json().map_err(py_err)?)
}

/// Adapt over the seen domains, then evaluate held-out domains frozen.
#[pyfunction]
#[pyo3(signature = (checkpoint, scenario, config = None, baseline = "full"))]
fn generalize<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    scenario: &Scenario,
    config: Option<&Config>,
    baseline: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_or_default(config);
    let b = self::baseline(baseline)?;
    let report = py
        .detach(|| {
            harness::run_generalization(&checkpoint.inner, &scenario.inner, &cfg, b, RunOptions::default())
        })
        .map_err(py_err)?;
    json_loads(py, &report.to_json().map_err(py_err)?)
}

/// Stateful online adapter around a source checkpoint.
#[pyclass(module = "ctta")]
struct Adapter {
    inner: CoreAdapter,
}

#[pymethods]
impl Adapter {
    #[new]
    #[pyo3(signature = (checkpoint, config = None, baseline = "full", seed = 0))]
    fn new(checkpoint: &Checkpoint, config: Option<&Config>, baseline: &str, seed: u64) -> PyResult<Self> {
        let cfg = config_or_default(config);
        let model = Model::from_checkpoint(&checkpoint.inner).map_err(py_err)?;
        let adapter = harness::make_adapter(model, &cfg, self::baseline(baseline)?, seed).map_err(py_err)?;
        Ok(Adapter { inner: adapter })
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict(&tensor(&x)?).map_err(py_err)?))
    }

    /// Domain embeddings of a batch under the current parameters.
    fn embed(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let e = self.inner.embed(&tensor(&x)?, 0).map_err(py_err)?;
        Ok(e.iter().map(<[f64]>::to_vec).collect())
    }

    /// One online iteration. Returns `(probabilities, record)`; the
    /// probabilities are the prediction made before adapting.
    #[pyo3(signature = (x, labels = None))]
    fn adapt_batch<'py>(
        &mut self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyAny>)> {
        let x = tensor(&x)?;
        let (probs, rec) = self.inner.adapt_batch(&x, labels.as_deref()).map_err(py_err)?;
        let rec = serde_json::to_string(&rec).map_err(|e| py_err(e.into()))?;
        Ok((rows(&probs), json_loads(py, &rec)?))
    }

    #[getter]
    fn batches_seen(&self) -> usize {
        self.inner.batches_seen()
    }

    /// The active adaptation settings as a dict.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let c: &AdaptationConfig = self.inner.config();
        json_loads(py, &serde_json::to_string(c).map_err(|e| py_err(e.into()))?)
    }
}

fn kernel(gamma: Option<f64>, f: &EmbeddingSet) -> PyResult<KernelConfig> {
    match gamma {
        Some(g) => KernelConfig::new(g).map_err(py_err),
        None => kernels::median_heuristic_gamma(f).map_err(py_err),
    }
}

/// Biased squared MMD under an RBF kernel; `gamma` defaults to the median
/// heuristic on `f`.
#[pyfunction]
#[pyo3(signature = (f, p, gamma = None))]
fn mmd_squared(f: Vec<Vec<f64>>, p: Vec<Vec<f64>>, gamma: Option<f64>) -> PyResult<f64> {
    let (f, p) = (set(&f)?, set(&p)?);
    kernels::mmd_squared(&f, &p, kernel(gamma, &f)?).map_err(py_err)
}

/// Prototype score of `p` against `f`.
#[pyfunction]
#[pyo3(signature = (f, p, gamma = None))]
fn score_j(f: Vec<Vec<f64>>, p: Vec<Vec<f64>>, gamma: Option<f64>) -> PyResult<f64> {
    let f = set(&f)?;
    let p = if p.is_empty() { None } else { Some(set(&p)?) };
    kernels::score_j(&f, p.as_ref(), kernel(gamma, &f)?).map_err(py_err)
}

/// Greedy prototype selection; returns `(indices, score trajectory)`.
#[pyfunction]
#[pyo3(signature = (f, n, gamma = None))]
fn greedy_select(f: Vec<Vec<f64>>, n: usize, gamma: Option<f64>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let f = set(&f)?;
    let sel = kernels::greedy_select(&f, n, kernel(gamma, &f)?).map_err(py_err)?;
    Ok((sel.indices, sel.trajectory))
}

#[pyfunction]
fn chamfer_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    kernels::chamfer_distance(&set(&a)?, &set(&b)?).map_err(py_err)
}

#[pyfunction]
fn median_gamma(f: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(kernels::median_heuristic_gamma(&set(&f)?).map_err(py_err)?.gamma())
}

/// Names accepted by the `baseline` arguments.
#[pyfunction]
fn baselines() -> Vec<&'static str> {
    BaselineKind::ALL.iter().map(|b| b.as_str()).collect()
}

#[pymodule]
fn ctta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Config>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Adapter>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generalize, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_squared, m)?)?;
    m.add_function(wrap_pyfunction!(score_j, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_select, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(median_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(baselines, m)?)?;
    let dict = PyDict::new(m.py());
    dict.set_item("report", harness::REPORT_SCHEMA_VERSION)?;
    dict.set_item("scenario", ctta_core::stream::SCENARIO_SCHEMA_VERSION)?;
    m.add("SCHEMA_VERSIONS", dict)?;
    Ok(())
}
