//! Python module `fedocvqa`. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fedocvqa::experiment::{self, CompareMetric, RunConfig, ScenarioKind};
use fedocvqa::fsp::{self, Discretizer, DocumentExample, Objective, SequencePair};
use fedocvqa::metrics::{self, EvalExample};
use fedocvqa::orchestrator::{self, records_to_csv};
use fedocvqa::seed::{fnv1a, stream, Purpose};
use fedocvqa::server::{ServerHyper, ServerOptKind};
use fedocvqa::vector::ParameterVector;
use fedocvqa::{partition, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Parse { .. } | Error::Structural(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

#[pyfunction]
#[pyo3(signature = (prediction, golds, tau = 0.5))]
fn anls(prediction: &str, golds: Vec<String>, tau: f64) -> f64 {
    metrics::anls_score(prediction, &golds, tau)
}

/// `examples` holds `(dataset, prediction, golds)` triples.
#[pyfunction]
#[pyo3(signature = (examples, tau = 0.5))]
fn two_step_average<'py>(
    py: Python<'py>,
    examples: Vec<(String, String, Vec<String>)>,
    tau: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let examples: Vec<EvalExample> = examples.into_iter().map(|(d, p, g)| EvalExample::new(d, p, g)).collect();
    to_py(py, &metrics::two_step_average_with(&examples, tau).map_err(err)?)
}

#[pyfunction]
fn clients_per_round(k: usize, fraction: f64) -> usize {
    orchestrator::clients_per_round(k, fraction)
}

#[pyfunction]
fn sample_clients(k: usize, fraction: f64, round: usize, seed: u64) -> PyResult<Vec<usize>> {
    orchestrator::sample_clients(k, fraction, round, seed).map_err(err)
}

#[pyfunction]
fn scenario_allocation(k: usize) -> PyResult<[usize; 3]> {
    partition::scenario_allocation(k).map_err(err)
}

/// Client shards for a standard scenario over the synthetic train split.
#[pyfunction]
#[pyo3(signature = (k, divisor = 50, seed = 0))]
fn partition_plan<'py>(py: Python<'py>, k: usize, divisor: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    if divisor == 0 {
        return Err(PyValueError::new_err("divisor must be positive"));
    }
    let manifest = partition::train_split_manifest(divisor);
    let docs: [Vec<_>; 3] = std::array::from_fn(|i| manifest[i].1.clone());
    let descriptors = partition::scenario(k, docs).map_err(err)?;
    to_py(py, &partition::partition(&descriptors, seed).map_err(err)?)
}

type Boxes = Vec<[f64; 4]>;

/// Builds one pretraining pair as `(input, target, input_boxes)`. The mask is
/// drawn from `(seed, key, objective)`.
#[pyfunction]
#[pyo3(signature = (tokens, boxes, objective, seed = 0, key = "", vocab = 500))]
fn fsp_pair(
    tokens: Vec<String>,
    boxes: Boxes,
    objective: &str,
    seed: u64,
    key: &str,
    vocab: usize,
) -> PyResult<(Vec<String>, Vec<String>, Boxes)> {
    let objective: Objective = parse(objective)?;
    let disc = Discretizer::new(vocab).map_err(err)?;
    let doc = DocumentExample::new(tokens, boxes).map_err(err)?;
    let mut rng = stream(seed, Purpose::Masking, &[fnv1a(key), objective as u64]);
    let plan = fsp::sample_default_mask(objective, doc.len(), &mut rng).map_err(err)?;
    let pair = fsp::build(&doc, &plan, &disc).map_err(err)?;
    Ok((pair.input, pair.target, pair.input_boxes))
}

/// Inverts `fsp_pair`; masked boxes come back as bin centers.
#[pyfunction]
#[pyo3(signature = (input, target, input_boxes, objective, vocab = 500))]
fn fsp_reconstruct(
    input: Vec<String>,
    target: Vec<String>,
    input_boxes: Boxes,
    objective: &str,
    vocab: usize,
) -> PyResult<(Vec<String>, Boxes)> {
    let objective: Objective = parse(objective)?;
    let disc = Discretizer::new(vocab).map_err(err)?;
    let pair = SequencePair {
        input,
        target,
        input_boxes,
    };
    let rec = fsp::reconstruct(&pair, objective, &disc).map_err(err)?;
    Ok((rec.example.tokens, rec.example.boxes))
}

#[pyclass(name = "ServerState", module = "fedocvqa")]
struct PyServerState {
    inner: fedocvqa::server::ServerState,
}

#[pymethods]
impl PyServerState {
    #[new]
    #[pyo3(signature = (theta, eta_s = 0.001, beta = 0.9, beta1 = 0.9, beta2 = 0.99, epsilon = 1e-5, fedavg_uses_eta = false))]
    fn new(
        theta: Vec<f64>,
        eta_s: f64,
        beta: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        fedavg_uses_eta: bool,
    ) -> PyResult<Self> {
        let hyper = ServerHyper {
            eta_s,
            beta,
            beta1,
            beta2,
            epsilon,
            fedavg_uses_eta,
        };
        hyper.validate().map_err(err)?;
        let theta = ParameterVector::new(theta).map_err(err)?;
        Ok(PyServerState {
            inner: fedocvqa::server::ServerState::new(theta, hyper),
        })
    }

    /// Applies one server step with aggregated update `delta`.
    fn step(&mut self, optimizer: &str, delta: Vec<f64>) -> PyResult<()> {
        let kind: ServerOptKind = parse(optimizer)?;
        let delta = ParameterVector::new(delta).map_err(err)?;
        self.inner = self.inner.step(kind, &delta).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.iter().copied().collect()
    }

    #[getter]
    fn m(&self) -> Vec<f64> {
        self.inner.m.iter().copied().collect()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v.iter().copied().collect()
    }

    #[getter]
    fn round(&self) -> usize {
        self.inner.round
    }
}

#[pyclass(name = "RunConfig", module = "fedocvqa")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (scenario = "k3", seed = 0))]
    fn new(scenario: &str, seed: u64) -> PyResult<Self> {
        let scenario: ScenarioKind = parse(scenario)?;
        Ok(PyRunConfig {
            inner: RunConfig::new(scenario, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: RunConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(PyRunConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn config_key(&self) -> String {
        self.inner.config_key()
    }

    #[getter]
    fn run_name(&self) -> String {
        self.inner.run_name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Sets fraction, rounds and server optimizer of `"pretrain"` or `"finetune"`.
    #[pyo3(signature = (phase, fraction = None, rounds = None, server_opt = None, server_lr = None))]
    fn set_phase(
        &mut self,
        phase: &str,
        fraction: Option<f64>,
        rounds: Option<usize>,
        server_opt: Option<&str>,
        server_lr: Option<f64>,
    ) -> PyResult<()> {
        let spec = match phase {
            "pretrain" => &mut self.inner.pretrain,
            "finetune" => &mut self.inner.finetune,
            other => return Err(PyValueError::new_err(format!("unknown phase {other:?}"))),
        };
        if let Some(f) = fraction {
            spec.fraction = f;
        }
        if let Some(r) = rounds {
            spec.rounds = r;
        }
        if let Some(o) = server_opt {
            spec.server_opt = parse(o)?;
        }
        if let Some(lr) = server_lr {
            spec.server.eta_s = lr;
        }
        Ok(())
    }

    #[getter]
    fn workers(&self) -> Option<usize> {
        self.inner.workers
    }

    #[setter]
    fn set_workers(&mut self, workers: Option<usize>) {
        self.inner.workers = workers;
    }

    /// Runs in memory and returns `{"summary": ..., "rounds_csv": ...}`.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let config = self.inner.clone();
        let out = py.detach(move || experiment::run_config(&config)).map_err(err)?;
        let result = serde_json::json!({
            "summary": out.summary,
            "rounds_csv": records_to_csv(&out.records),
        });
        to_py(py, &result)
    }

    /// Writes the run directory under `out` and returns its path.
    fn run_to_dir(&self, py: Python<'_>, out: PathBuf) -> PyResult<PathBuf> {
        let config = self.inner.clone();
        py.detach(move || experiment::run_to_dir(&config, &out)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.inner.run_name())
    }
}

/// Ranks run directories by `metric` (`final_score` or `final_loss`).
#[pyfunction]
#[pyo3(signature = (dirs, metric = "final_score"))]
fn compare_runs<'py>(py: Python<'py>, dirs: Vec<PathBuf>, metric: &str) -> PyResult<Bound<'py, PyAny>> {
    let metric: CompareMetric = parse(metric)?;
    to_py(py, &experiment::compare_runs(&dirs, metric).map_err(err)?)
}

#[pymodule(name = "fedocvqa")]
fn fedocvqa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(anls, m)?)?;
    m.add_function(wrap_pyfunction!(two_step_average, m)?)?;
    m.add_function(wrap_pyfunction!(clients_per_round, m)?)?;
    m.add_function(wrap_pyfunction!(sample_clients, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_allocation, m)?)?;
    m.add_function(wrap_pyfunction!(partition_plan, m)?)?;
    m.add_function(wrap_pyfunction!(fsp_pair, m)?)?;
    m.add_function(wrap_pyfunction!(fsp_reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_class::<PyServerState>()?;
    m.add_class::<PyRunConfig>()?;
    Ok(())
}
