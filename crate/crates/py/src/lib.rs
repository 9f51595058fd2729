//! Python bindings: configuration, single runs, replay, campaigns,
//! exploration and the mutation check.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use moonshot_core as core;
use moonshot_core::harness::{CampaignSpec, MutantOptions};
use moonshot_core::sim::explore::ExploreOptions;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Leader of `view` among `n` validators.
#[pyfunction]
fn leader(view: u64, n: usize) -> usize {
    core::leader(core::View(view), n).index()
}

#[pyfunction]
fn quorum(f: usize) -> usize {
    2 * f + 1
}

#[pyfunction]
fn mutations() -> Vec<&'static str> {
    core::Mutation::ALL.iter().map(|m| m.name()).collect()
}

#[pyfunction]
fn checks() -> Vec<&'static str> {
    core::Check::ALL.iter().map(|c| c.name()).collect()
}

#[pyclass(name = "SimConfig", module = "moonshot", from_py_object)]
#[derive(Clone)]
struct PySimConfig {
    inner: core::SimConfig,
}

#[pymethods]
impl PySimConfig {
    /// Keyword arguments use the config file keys; values may be given as
    /// strings in file syntax or as plain Python values.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = core::SimConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &py_value_text(&v)?).map_err(value_err)?;
            }
        }
        inner.validate().map_err(value_err)?;
        Ok(PySimConfig { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PySimConfig {
            inner: core::SimConfig::parse(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySimConfig {
            inner: core::SimConfig::load(&path).map_err(value_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, &py_value_text(value)?).map_err(value_err)?;
        next.validate().map_err(value_err)?;
        self.inner = next;
        Ok(())
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn f(&self) -> usize {
        self.inner.f
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn max_steps(&self) -> u64 {
        self.inner.max_steps
    }

    #[getter]
    fn byzantine(&self) -> Vec<usize> {
        self.inner.byzantine.iter().map(|b| b.index()).collect()
    }

    #[getter]
    fn adversary_strategy(&self) -> String {
        self.inner.adversary_strategy.to_string()
    }

    #[getter]
    fn mutation(&self) -> Option<&'static str> {
        self.inner.mutation.map(|m| m.name())
    }

    fn __repr__(&self) -> String {
        format!("SimConfig({})", self.inner.render().trim_end().replace('\n', ", "))
    }
}

fn py_value_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(s);
    }
    if let Ok(i) = v.extract::<u64>() {
        return Ok(i.to_string());
    }
    if let Ok(items) = v.extract::<Vec<u64>>() {
        let parts: Vec<String> = items.iter().map(u64::to_string).collect();
        return Ok(parts.join(","));
    }
    if v.is_none() {
        return Ok("none".into());
    }
    Ok(v.str()?.to_string())
}

#[pyclass(name = "RunReport", module = "moonshot", frozen, skip_from_py_object)]
struct PyRunReport {
    inner: core::RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn commits(&self) -> BTreeMap<usize, usize> {
        self.inner.commits.iter().map(|(k, v)| (k.index(), *v)).collect()
    }

    #[getter]
    fn first_commit_step(&self) -> Option<u64> {
        self.inner.first_commit_step
    }

    #[getter]
    fn warnings(&self) -> u64 {
        self.inner.warnings
    }

    /// `(check, step, detail)` triples.
    #[getter]
    fn violations(&self) -> Vec<(&'static str, u64, String)> {
        self.inner
            .violations
            .iter()
            .map(|v| (v.check.name(), v.step, v.detail.clone()))
            .collect()
    }

    #[getter]
    fn max_chain(&self) -> usize {
        self.inner.max_chain()
    }

    fn is_safe(&self) -> bool {
        self.inner.is_safe()
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        self.inner.render().lines().next().unwrap_or_default().to_string()
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: &PySimConfig) -> PyResult<PyRunReport> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| core::run(&cfg)).map_err(runtime_err)?;
    Ok(PyRunReport { inner })
}

/// Returns the report and the trace text.
#[pyfunction]
fn run_traced(py: Python<'_>, config: &PySimConfig) -> PyResult<(PyRunReport, String)> {
    let cfg = config.inner.clone();
    let (inner, trace) = py.detach(|| core::run_traced(&cfg)).map_err(runtime_err)?;
    Ok((PyRunReport { inner }, trace))
}

/// Replays trace text; raises on any byte mismatch.
#[pyfunction]
fn replay(py: Python<'_>, trace: &str) -> PyResult<PyRunReport> {
    let inner = py.detach(|| core::replay_str(trace)).map_err(runtime_err)?;
    Ok(PyRunReport { inner })
}

#[pyfunction]
#[pyo3(signature = (config, start, end, adversaries = None, rotate_byzantine = false, jobs = 1))]
fn campaign<'py>(
    py: Python<'py>,
    config: &PySimConfig,
    start: u64,
    end: u64,
    adversaries: Option<Vec<String>>,
    rotate_byzantine: bool,
    jobs: usize,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let adversaries = adversaries
        .unwrap_or_default()
        .iter()
        .map(|s| s.parse::<core::AdversaryStrategy>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let spec = CampaignSpec {
        base: config.inner.clone(),
        seeds: start..end,
        adversaries,
        rotate_byzantine,
        jobs,
    };
    let sum = py.detach(|| core::campaign(&spec)).map_err(runtime_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("runs", sum.runs)?;
    d.set_item("violating_runs", sum.violating_runs)?;
    d.set_item("total_commits", sum.total_commits)?;
    d.set_item("max_chain", sum.max_chain)?;
    d.set_item("min_steps_to_first_commit", sum.min_steps_to_first_commit)?;
    d.set_item("max_steps_to_first_commit", sum.max_steps_to_first_commit)?;
    d.set_item("runs_without_commit", sum.runs_without_commit)?;
    d.set_item("violating_seeds", sum.violating_seeds.clone())?;
    d.set_item(
        "first_violation",
        sum.first_violation.as_ref().map(|(s, v)| (*s, v.check.name(), v.step)),
    )?;
    d.set_item("summary", sum.render())?;
    Ok(d)
}

/// Explores every interleaving up to `depth`. A scripted adversary in the
/// config supplies the injectable messages.
#[pyfunction]
#[pyo3(signature = (config, depth, timers = false, max_states = None))]
fn explore<'py>(
    py: Python<'py>,
    config: &PySimConfig,
    depth: usize,
    timers: bool,
    max_states: Option<u64>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let cfg = config.inner.clone();
    let mut opts = ExploreOptions::from_config(&cfg, depth).map_err(value_err)?;
    opts.timers = timers;
    if let Some(m) = max_states {
        opts.max_states = m;
    }
    let r = py
        .detach(|| core::sim::explore::explore(&cfg, &opts))
        .map_err(runtime_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("depth", r.depth)?;
    d.set_item("states", r.states)?;
    d.set_item("complete", r.complete)?;
    d.set_item(
        "violations",
        r.violations.iter().map(|v| v.check.name()).collect::<Vec<_>>(),
    )?;
    d.set_item("counterexample_len", r.counterexample.len())?;
    Ok(d)
}

/// `(mutation, killed, description)` for each mutation.
#[pyfunction]
#[pyo3(signature = (seeds = 10_000, max_steps = 2000, depth = 12, jobs = 1))]
fn mutants(
    py: Python<'_>,
    seeds: u64,
    max_steps: u64,
    depth: usize,
    jobs: usize,
) -> PyResult<Vec<(&'static str, bool, String)>> {
    let opts = MutantOptions {
        seeds: 0..seeds,
        max_steps,
        explore_depth: depth,
        jobs,
    };
    let res = py.detach(|| core::kill_all(&opts)).map_err(runtime_err)?;
    Ok(res
        .iter()
        .map(|r| (r.mutation.name(), r.kill.is_some(), r.render()))
        .collect())
}

#[pymodule]
fn moonshot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_function(wrap_pyfunction!(leader, m)?)?;
    m.add_function(wrap_pyfunction!(quorum, m)?)?;
    m.add_function(wrap_pyfunction!(mutations, m)?)?;
    m.add_function(wrap_pyfunction!(checks, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_traced, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(campaign, m)?)?;
    m.add_function(wrap_pyfunction!(explore, m)?)?;
    m.add_function(wrap_pyfunction!(mutants, m)?)?;
    Ok(())
}
