//! Python bindings for `streamkv`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use streamkv::analysis::{strategy_bench as bench, Strategy, Workload};
use streamkv::cli::{bench_workloads, cmd_generate};
use streamkv::config::RunConfig;
use streamkv::generator::{self, Generator};
use streamkv::numerics::Tensor;
use streamkv::rope::{self, Position3D};
use streamkv::{kvcache, selector, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config { .. } | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

/// Run configuration (TOML-backed).
#[pyclass(name = "RunConfig", module = "streamkv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml_str(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn noise_seed(&self) -> u64 {
        self.inner.seeds.noise
    }

    #[setter]
    fn set_noise_seed(&mut self, seed: u64) {
        self.inner.seeds.noise = seed;
    }

    #[getter]
    fn tokens_per_block(&self) -> usize {
        self.inner.geometry.tokens_per_block()
    }

    #[getter]
    fn steady_context_tokens(&self) -> usize {
        self.inner.cache_config().steady_context_tokens()
    }
}

/// Output of an in-memory generation run.
#[pyclass(name = "Generation", module = "streamkv_py")]
struct PyGeneration {
    #[pyo3(get)]
    cache_trace: Vec<Py<PyDict>>,
    #[pyo3(get)]
    selection_trace: Vec<Py<PyDict>>,
    #[pyo3(get)]
    latent_shape: Vec<usize>,
    latents: Vec<Vec<f64>>,
}

#[pymethods]
impl PyGeneration {
    fn __len__(&self) -> usize {
        self.latents.len()
    }

    /// Flat latent of block `i` (0-based), laid out as `latent_shape`.
    fn latent(&self, i: usize) -> PyResult<Vec<f64>> {
        self.latents
            .get(i)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("block {i} out of range")))
    }
}

fn trace_dict<'py>(py: Python<'py>, r: &generator::CacheTraceRow) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("block_index", r.block_index)?;
    d.set_item("sink_blocks", r.sink_blocks)?;
    d.set_item("mid_blocks", r.mid_blocks)?;
    d.set_item("recent_blocks", r.recent_blocks)?;
    d.set_item("evicted_frames", r.evicted_frames)?;
    d.set_item("delta_frames", r.delta_frames)?;
    d.set_item("context_tokens", r.context_tokens)?;
    d.set_item("full_history_tokens", r.full_history_tokens)?;
    d.set_item("estimated_bytes", r.estimated_bytes)?;
    d.set_item("attention_flops", r.attention_flops)?;
    d.set_item("scoring_flops", r.scoring_flops)?;
    d.set_item("correction_rotations", r.correction_rotations)?;
    d.set_item("correction_flops", r.correction_flops)?;
    d.set_item("selected", r.selected)?;
    Ok(d.unbind())
}

fn route_dict<'py>(py: Python<'py>, r: &selector::RouteRecord) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("block", r.block)?;
    d.set_item("step", r.step)?;
    d.set_item("scored", r.scored)?;
    d.set_item("candidates", r.candidates.clone())?;
    d.set_item("scores", r.scores.clone())?;
    d.set_item("selected", r.selected.clone())?;
    Ok(d.unbind())
}

/// Generate `num_blocks` blocks in memory.
#[pyfunction]
fn generate(py: Python<'_>, config: &PyRunConfig, num_blocks: usize) -> PyResult<PyGeneration> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || Generator::generate(&cfg, num_blocks, false))
        .map_err(to_py)?;
    Ok(PyGeneration {
        cache_trace: out.cache_trace.iter().map(|r| trace_dict(py, r)).collect::<PyResult<_>>()?,
        selection_trace: out.selection_trace.iter().map(|r| route_dict(py, r)).collect::<PyResult<_>>()?,
        latent_shape: out.latents.first().map(|b| b.latent.shape().to_vec()).unwrap_or_default(),
        latents: out.latents.into_iter().map(|b| b.latent.into_data()).collect(),
    })
}

/// Generate and write a run directory, as the `generate` subcommand does.
/// Returns the config hash.
#[pyfunction]
fn generate_to_dir(py: Python<'_>, config: &PyRunConfig, num_blocks: usize, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    let summary = py.detach(move || cmd_generate(&cfg, num_blocks, &out)).map_err(to_py)?;
    Ok(summary.config_hash)
}

/// KV footprint for a clip of `duration_s` seconds under the config's memory geometry.
#[pyfunction]
#[pyo3(signature = (duration_s, config=None))]
fn memory_report<'py>(py: Python<'py>, duration_s: f64, config: Option<&PyRunConfig>) -> PyResult<Bound<'py, PyDict>> {
    let geom = config.map(|c| c.inner.memory.clone()).unwrap_or_default();
    let r = kvcache::memory_report(&geom, duration_s).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("duration_s", r.duration_s)?;
    d.set_item("latent_frames", r.latent_frames)?;
    d.set_item("total_tokens", r.total_tokens)?;
    d.set_item("full_cache_bytes", r.full_cache_bytes)?;
    d.set_item("bounded_context_tokens", r.bounded_context_tokens)?;
    d.set_item("bounded_cache_bytes", r.bounded_cache_bytes)?;
    d.set_item("stored_buffer_tokens", r.stored_buffer_tokens)?;
    d.set_item("stored_buffer_bytes", r.stored_buffer_bytes)?;
    Ok(d)
}

#[pyfunction]
fn sigma_schedule(steps: usize, shift: f64) -> PyResult<Vec<f64>> {
    generator::sigma_schedule(steps, shift).map_err(to_py)
}

/// Ascending indices of the `n_top` highest scores.
#[pyfunction]
fn select_topk(scores: Vec<f64>, n_top: usize) -> Vec<usize> {
    selector::select_topk(&scores, n_top)
}

#[pyfunction]
fn subsample_queries(l_q: usize, gamma: f64, min_queries: usize) -> Vec<usize> {
    selector::subsample_queries(l_q, gamma, min_queries)
}

/// Rotary-encode flat keys `[L, heads, head_dim]` at `(t, y, x)` positions
/// using the config's rope layout.
#[pyfunction]
fn apply_rope(
    config: &PyRunConfig,
    keys: Vec<f64>,
    shape: Vec<usize>,
    positions: Vec<(usize, usize, usize)>,
) -> PyResult<Vec<f64>> {
    let cfg = config.inner.geometry.rope().map_err(to_py)?;
    let pos: Vec<Position3D> = positions.iter().map(|&(t, y, x)| Position3D::new(t, y, x)).collect();
    Ok(rope::apply_rope(&tensor(shape, keys)?, &pos, &cfg).map_err(to_py)?.into_data())
}

/// Move already-encoded keys `delta` frames later in time.
#[pyfunction]
fn temporal_shift(config: &PyRunConfig, keys: Vec<f64>, shape: Vec<usize>, delta: usize) -> PyResult<Vec<f64>> {
    let cfg = config.inner.geometry.rope().map_err(to_py)?;
    Ok(rope::temporal_shift(&tensor(shape, keys)?, delta, &cfg).map_err(to_py)?.into_data())
}

/// `(workload, strategy, retained_mass, min_mass, churn)`
type BenchTuple = (String, String, f64, f64, f64);

/// Retention benchmark over the config's workloads: list of
/// `(workload, strategy, retained_mass, min_mass, churn)`.
#[pyfunction]
#[pyo3(signature = (config, strategies="random,fifo,dynamic"))]
fn strategy_bench(config: &PyRunConfig, strategies: &str) -> PyResult<Vec<BenchTuple>> {
    let list = Strategy::parse_list(strategies).map_err(to_py)?;
    let mut rows = Vec::new();
    for (name, spec) in bench_workloads(&config.inner) {
        let w = Workload::build(&spec).map_err(to_py)?;
        for r in bench(&w, &list).map_err(to_py)? {
            rows.push((name.to_string(), r.strategy.name().to_string(), r.retained_mass, r.min_mass, r.churn));
        }
    }
    Ok(rows)
}

#[pymodule]
fn streamkv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyGeneration>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_to_dir, m)?)?;
    m.add_function(wrap_pyfunction!(memory_report, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_queries, m)?)?;
    m.add_function(wrap_pyfunction!(apply_rope, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_shift, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_bench, m)?)?;
    Ok(())
}
