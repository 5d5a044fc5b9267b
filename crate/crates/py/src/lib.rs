//! Python bindings: scenario configs, the orchestrator and the benchmark
//! drivers. Structured results cross over as plain dicts and lists.

use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use ::elastic_rdma::clock::micros;
use ::elastic_rdma::harness::{self, DataOp, DataPlaneParams, Mode};
use ::elastic_rdma::orchestrator::{self as orch, LatencyClass, RequestSpec, Scheme, StartKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Round-trips a serde value through JSON into Python objects.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_scheme(name: &str) -> PyResult<Scheme> {
    name.parse().map_err(value_err)
}

fn parse_start(name: &str) -> PyResult<StartKind> {
    name.parse().map_err(value_err)
}

#[pyclass(name = "ScenarioConfig", from_py_object)]
#[derive(Clone, Default)]
struct PyConfig {
    inner: orch::ScenarioConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        orch::ScenarioConfig::load(path)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        orch::ScenarioConfig::from_toml_str(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Sets a top-level cost field, e.g. `syscall_penalty`.
    fn set_cost(&mut self, name: &str, value: f64) -> PyResult<()> {
        let mut costs = serde_json::to_value(&self.inner.costs).map_err(runtime_err)?;
        match costs.get_mut(name) {
            Some(slot) if slot.is_number() => *slot = serde_json::json!(value),
            _ => return Err(PyValueError::new_err(format!("no cost named `{name}`"))),
        }
        let costs = serde_json::from_value(costs).map_err(value_err)?;
        self.inner.costs = costs;
        self.inner.costs.validate().map_err(value_err)?;
        Ok(())
    }

    fn hash(&self) -> String {
        harness::config_hash(&self.inner)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn config_or_default(config: Option<PyRef<'_, PyConfig>>) -> orch::ScenarioConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

#[pyclass(name = "BenchResult", from_py_object)]
#[derive(Clone)]
struct PyBenchResult {
    inner: harness::BenchResult,
}

#[pymethods]
impl PyBenchResult {
    #[getter]
    fn scenario(&self) -> &str {
        &self.inner.scenario
    }

    #[getter]
    fn scheme(&self) -> &str {
        &self.inner.scheme
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn repeats(&self) -> u32 {
        self.inner.repeats
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.rows)
    }

    fn aggregate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.aggregate())
    }

    fn __repr__(&self) -> String {
        format!(
            "BenchResult({} {} seed={} repeats={})",
            self.inner.scenario, self.inner.scheme, self.inner.seed, self.inner.repeats
        )
    }
}

fn unwrap_results(results: Vec<PyBenchResult>) -> Vec<harness::BenchResult> {
    results.into_iter().map(|r| r.inner).collect()
}

#[pyclass(name = "Orchestrator", unsendable)]
struct PyOrchestrator {
    inner: orch::Orchestrator,
}

#[pymethods]
impl PyOrchestrator {
    #[new]
    #[pyo3(signature = (scheme = "swift", seed = 0, config = None))]
    fn new(scheme: &str, seed: u64, config: Option<PyRef<'_, PyConfig>>) -> PyResult<Self> {
        let inner = orch::Orchestrator::new(config_or_default(config), parse_scheme(scheme)?, seed)
            .map_err(runtime_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn scheme(&self) -> &'static str {
        self.inner.scheme().name()
    }

    /// Current virtual time in microseconds.
    #[getter]
    fn now_us(&self) -> f64 {
        self.inner.now().as_secs_f64() * 1e6
    }

    fn advance(&self, us: f64) -> PyResult<()> {
        if !(us.is_finite() && us >= 0.0) {
            return Err(PyValueError::new_err(
                "advance takes a non-negative duration",
            ));
        }
        self.inner.clock().advance(micros(us));
        Ok(())
    }

    /// Serves one request and returns a dict with the start kind, ids,
    /// timing breakdown (microseconds) and the handler's reply bytes.
    #[pyo3(signature = (user, function = "noop", fast = false, payload = None))]
    fn handle_request<'py>(
        &mut self,
        py: Python<'py>,
        user: &str,
        function: &str,
        fast: bool,
        payload: Option<Vec<u8>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let class = if fast {
            LatencyClass::Fast
        } else {
            LatencyClass::Normal
        };
        let mut spec = RequestSpec::new(user, function, class);
        if let Some(p) = payload {
            spec = spec.with_payload(p);
        }
        let out = self.inner.handle_request(&spec).map_err(runtime_err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("start", out.start.name())?;
        d.set_item("fell_back", out.fell_back)?;
        d.set_item("container", out.container)?;
        d.set_item("pid", out.pid)?;
        d.set_item("qp_ids", out.qp_ids.clone())?;
        d.set_item("timing", to_py(py, &out.timing)?)?;
        match &out.result {
            Ok(bytes) => d.set_item("result", PyBytes::new(py, bytes))?,
            Err(msg) => d.set_item("error", msg)?,
        }
        Ok(d.into_any())
    }

    /// Terminates the container serving `user`/`function`, if any.
    #[pyo3(signature = (user, function = "noop"))]
    fn terminate(&mut self, user: &str, function: &str) -> PyResult<bool> {
        match self.inner.container_of(user, function) {
            Some(id) => self
                .inner
                .terminate_container(id)
                .map(|_| true)
                .map_err(runtime_err),
            None => Ok(false),
        }
    }

    fn drain(&mut self) -> PyResult<()> {
        self.inner.drain().map_err(runtime_err)
    }

    fn check_invariants(&self) -> Vec<String> {
        self.inner.check_invariants()
    }

    fn events_jsonl(&self) -> String {
        self.inner.events().to_jsonl()
    }
}

#[pyfunction]
#[pyo3(signature = (start, scheme = "swift", repeats = 10, seed = 0, config = None))]
fn bench_control_plane(
    start: &str,
    scheme: &str,
    repeats: u32,
    seed: u64,
    config: Option<PyRef<'_, PyConfig>>,
) -> PyResult<PyBenchResult> {
    harness::bench_control_plane(
        &config_or_default(config),
        parse_start(start)?,
        parse_scheme(scheme)?,
        repeats,
        seed,
    )
    .map(|inner| PyBenchResult { inner })
    .map_err(runtime_err)
}

#[pyfunction]
#[pyo3(signature = (
    op, mode = "sync", threads = 1, duration_us = 1000.0, scheme = "swift",
    repeats = 1, seed = 0, batch = 16, size = 64, config = None
))]
#[allow(clippy::too_many_arguments)]
fn bench_data_plane(
    op: &str,
    mode: &str,
    threads: usize,
    duration_us: f64,
    scheme: &str,
    repeats: u32,
    seed: u64,
    batch: usize,
    size: usize,
    config: Option<PyRef<'_, PyConfig>>,
) -> PyResult<PyBenchResult> {
    if !(duration_us.is_finite() && duration_us > 0.0) {
        return Err(PyValueError::new_err("duration_us must be > 0"));
    }
    let params = DataPlaneParams {
        op: op.parse::<DataOp>().map_err(value_err)?,
        mode: mode.parse::<Mode>().map_err(value_err)?,
        threads,
        duration: Duration::from_secs_f64(duration_us / 1e6),
        batch,
        size,
        ..DataPlaneParams::default()
    };
    harness::bench_data_plane(
        &config_or_default(config),
        parse_scheme(scheme)?,
        &params,
        repeats,
        seed,
    )
    .map(|inner| PyBenchResult { inner })
    .map_err(runtime_err)
}

/// Returns `(passed, lines)` for a set of control-plane results.
#[pyfunction]
fn requirement_check(results: Vec<PyBenchResult>) -> PyResult<(bool, Vec<String>)> {
    let report = harness::requirement_check(&unwrap_results(results)).map_err(value_err)?;
    let lines = report.rules.iter().map(|r| r.to_string()).collect();
    Ok((report.passed(), lines))
}

#[pyfunction]
fn to_csv(results: Vec<PyBenchResult>) -> PyResult<String> {
    harness::to_csv(&unwrap_results(results)).map_err(runtime_err)
}

#[pyfunction]
#[pyo3(signature = (results, path, format = None))]
fn write_results(results: Vec<PyBenchResult>, path: &str, format: Option<&str>) -> PyResult<()> {
    let path = std::path::Path::new(path);
    let format = match format {
        Some(f) => f.parse().map_err(value_err)?,
        None => harness::Format::for_path(path),
    };
    harness::write_results(&unwrap_results(results), format, path).map_err(runtime_err)
}

#[pyfunction]
fn read_results(path: &str) -> PyResult<Vec<PyBenchResult>> {
    harness::read_results(std::path::Path::new(path))
        .map(|v| v.into_iter().map(|inner| PyBenchResult { inner }).collect())
        .map_err(value_err)
}

#[pymodule]
#[pyo3(name = "elastic_rdma")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBenchResult>()?;
    m.add_class::<PyOrchestrator>()?;
    m.add_function(wrap_pyfunction!(bench_control_plane, m)?)?;
    m.add_function(wrap_pyfunction!(bench_data_plane, m)?)?;
    m.add_function(wrap_pyfunction!(requirement_check, m)?)?;
    m.add_function(wrap_pyfunction!(to_csv, m)?)?;
    m.add_function(wrap_pyfunction!(write_results, m)?)?;
    m.add_function(wrap_pyfunction!(read_results, m)?)?;
    m.add(
        "SCHEMES",
        Scheme::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
    )?;
    m.add(
        "START_KINDS",
        StartKind::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
