//! Python bindings: configuration and whole runs, the network, bit-flip
//! with its search, and the metric helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use aher_core::config::{load_run_config, RunConfig};
use aher_core::envcore::Environment;
use aher_core::environments::{BitFlip, BitFlipConfig, BitState};
use aher_core::grammar::{self, Dataset, Expression};
use aher_core::mcts::{self, MctsParams};
use aher_core::model::{self, Architecture, NetParams};
use aher_core::trainer::{self, DiscoveryRecord, IterationMetrics};
use aher_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Env(_) | Error::GrammarParse { .. } | Error::Grammar(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A resolved run configuration.
#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: load_run_config(text, &overrides).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn run_dir_name(&self) -> String {
        self.inner.run_dir_name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn env_kind(&self) -> &'static str {
        self.inner.env_kind()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &IterationMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("iteration", m.iteration)?;
    d.set_item("success_rate", m.success_rate)?;
    d.set_item("mean_return", m.mean_return)?;
    d.set_item("hindsight_ratio", m.hindsight_ratio)?;
    d.set_item("starvation_count", m.starvation_count)?;
    d.set_item("expanded_nodes", m.expanded_nodes)?;
    d.set_item("loss_total", m.loss_total)?;
    d.set_item("loss_policy", m.loss_policy)?;
    d.set_item("loss_value", m.loss_value)?;
    d.set_item("wall_time_s", m.wall_time_s)?;
    Ok(d)
}

/// Trains a configuration to completion. Returns `(metrics, discovery)`;
/// with `out`, also writes the run directory's CSVs and checkpoint there.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out: Option<PathBuf>,
) -> PyResult<(Vec<Bound<'py, PyDict>>, Option<Vec<(String, u64, usize, bool)>>)> {
    let cfg = config.inner.clone();
    let outcome = py
        .allow_threads(move || match out {
            Some(dir) => {
                std::fs::create_dir_all(&dir)?;
                trainer::execute(&cfg, Some(&dir))
            }
            None => trainer::execute(&cfg, None),
        })
        .map_err(to_py)?;
    let metrics = outcome
        .metrics
        .iter()
        .map(|m| metrics_dict(py, m))
        .collect::<PyResult<Vec<_>>>()?;
    let discovery = outcome.discovery.map(|d| {
        d.into_iter()
            .map(|r| (r.target_id, r.seed, r.nodes_expanded, r.found))
            .collect()
    });
    Ok((metrics, discovery))
}

/// Policy/value network.
#[pyclass(name = "Network")]
#[derive(Clone)]
struct PyNetwork {
    inner: NetParams,
    opt: model::Adam,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (input, hidden, actions, seed = 0, dropout = 0.3))]
    fn new(input: usize, hidden: Vec<usize>, actions: usize, seed: u64, dropout: f64) -> PyResult<Self> {
        let arch = Architecture {
            dropout,
            ..Architecture::new(input, &hidden, actions)
        };
        let inner = NetParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
        let opt = model::Adam::new(inner.len(), Default::default());
        Ok(PyNetwork { inner, opt })
    }

    /// Inference: `(policy, value)` with dropout off.
    fn forward(&self, features: Vec<f64>, mask: Vec<bool>) -> PyResult<(Vec<f64>, f64)> {
        let out = self.inner.forward(&features, &mask, None).map_err(to_py)?;
        Ok((out.policy, out.value))
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&self.opt, &path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, opt) = NetParams::load(&path).map_err(to_py)?;
        Ok(PyNetwork { inner, opt })
    }
}

/// Bit-flip environment; states are `(bits, t)`.
#[pyclass(name = "BitFlip")]
struct PyBitFlip {
    inner: BitFlip,
}

impl PyBitFlip {
    fn state(&self, bits: Vec<u8>, t: usize) -> BitState {
        let done = t >= self.inner.spec().horizon;
        BitState { bits, t, done }
    }
}

#[pymethods]
impl PyBitFlip {
    #[new]
    #[pyo3(signature = (n_bits, horizon = None))]
    fn new(n_bits: usize, horizon: Option<usize>) -> PyResult<Self> {
        Ok(PyBitFlip {
            inner: BitFlip::new(&BitFlipConfig { n_bits, horizon }).map_err(to_py)?,
        })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.spec().horizon
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.spec().feature_dim
    }

    /// `(bits, goal)` for a fresh episode.
    fn reset(&self, seed: u64) -> PyResult<(Vec<u8>, Vec<u8>)> {
        let obs = self
            .inner
            .reset(&mut ChaCha8Rng::seed_from_u64(seed), None)
            .map_err(to_py)?;
        Ok((obs.state.bits, obs.desired_goal))
    }

    /// `(bits, reward, terminal, success)`.
    fn step(&self, bits: Vec<u8>, t: usize, goal: Vec<u8>, action: usize) -> PyResult<(Vec<u8>, f64, bool, bool)> {
        let r = self
            .inner
            .step(&self.state(bits, t), &goal, action)
            .map_err(to_py)?;
        Ok((r.observation.state.bits, r.reward, r.terminal, r.success))
    }

    fn features(&self, bits: Vec<u8>, t: usize, goal: Vec<u8>) -> Vec<f64> {
        self.inner.encode(&self.state(bits, t), &goal)
    }

    /// Root visit counts of one PUCT search guided by `net`.
    #[pyo3(signature = (net, bits, t, goal, simulations = 50, seed = 0, root_noise = false))]
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        net: &PyNetwork,
        bits: Vec<u8>,
        t: usize,
        goal: Vec<u8>,
        simulations: usize,
        seed: u64,
        root_noise: bool,
    ) -> PyResult<Vec<u32>> {
        let params = MctsParams {
            simulations,
            root_noise,
            ..MctsParams::default()
        };
        let r = mcts::search(
            &self.inner,
            &self.state(bits, t),
            &goal,
            &net.inner,
            &params,
            None,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(to_py)?;
        Ok(r.visit_counts)
    }
}

#[pyfunction]
fn value_targets(rewards: Vec<f64>, scale: f64) -> Vec<f64> {
    trainer::value_targets(&rewards, scale)
}

#[pyfunction]
fn confidence_interval(values: Vec<f64>) -> PyResult<(f64, f64)> {
    aher_core::stats::confidence_interval(&values).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (series, threshold = 0.8))]
fn iterations_to_threshold(series: Vec<f64>, threshold: f64) -> PyResult<Option<usize>> {
    trainer::iterations_to_threshold(&series, threshold).map_err(to_py)
}

/// `records` are `(target_id, nodes_expanded, found)`; returns
/// `(mean, median)`.
#[pyfunction]
#[pyo3(signature = (records, failure_cost = 1000.0))]
fn discovery_aggregate(records: Vec<(String, usize, bool)>, failure_cost: f64) -> PyResult<(f64, f64)> {
    let recs: Vec<DiscoveryRecord> = records
        .into_iter()
        .map(|(target_id, nodes_expanded, found)| DiscoveryRecord {
            target_id,
            seed: 0,
            nodes_expanded,
            found,
        })
        .collect();
    let s = trainer::discovery_aggregate(&recs, failure_cost).map_err(to_py)?;
    Ok((s.mean, s.median))
}

#[pyfunction]
fn extract_policy(visits: Vec<u32>, tau: f64) -> Vec<f64> {
    mcts::extract_policy(&visits, tau)
}

#[pyfunction]
fn masked_softmax(logits: Vec<f64>, mask: Vec<bool>) -> PyResult<Vec<f64>> {
    model::masked_softmax(&logits, &mask).map_err(to_py)
}

/// NRMSE of an expression such as `"x * (x - 1)"` on `(xs, ys)`.
#[pyfunction]
fn nrmse(expression: &str, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    let expr = Expression::parse(expression).map_err(to_py)?;
    let data = Dataset::new(xs, ys).map_err(to_py)?;
    Ok(grammar::nrmse(&expr, &data))
}

#[pymodule]
pub fn aher(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyBitFlip>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(value_targets, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_interval, m)?)?;
    m.add_function(wrap_pyfunction!(iterations_to_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(discovery_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(extract_policy, m)?)?;
    m.add_function(wrap_pyfunction!(masked_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    Ok(())
}
