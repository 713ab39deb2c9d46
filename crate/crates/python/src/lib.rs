//! Python bindings: scenarios, forward simulation, sensitivity matrices,
//! greedy selection and configured experiments.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wavefield_doe::estimation::relative_error;
use wavefield_doe::experiment::{self, BaselineStats, Experiment, Overrides};
use wavefield_doe::forward::{
    arrival_time_difference as atd, BandpassSpec, ForwardModel, FrequencyGrid, ReferenceModel, WaveKind,
};
use wavefield_doe::model::{self, ParameterVector, PerturbationSpec, PARAMETER_NAMES, PARAM_COUNT};
use wavefield_doe::selection::{greedy_select as greedy, Candidates};
use wavefield_doe::sensitivity;

fn err(e: wavefield_doe::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn grid(count: usize, f_max: f64) -> PyResult<FrequencyGrid> {
    FrequencyGrid::new(count, f_max).map_err(err)
}

fn band(b: Option<(f64, f64)>) -> PyResult<Option<BandpassSpec>> {
    b.map(|(lo, hi)| BandpassSpec::new(lo, hi).map_err(err)).transpose()
}

/// Layered model, source and station network.
#[pyclass(name = "Scenario", module = "wavefield_doe_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: model::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn hypocenter1() -> Self {
        PyScenario { inner: model::Scenario::hypocenter1() }
    }

    #[staticmethod]
    fn hypocenter2() -> Self {
        PyScenario { inner: model::Scenario::hypocenter2() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario { inner: model::Scenario::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyScenario { inner: model::Scenario::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// The 12 estimated parameters in canonical order.
    fn parameters(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.parameters().map_err(err)?.0.to_vec())
    }

    fn with_parameters(&self, values: Vec<f64>) -> PyResult<Self> {
        let arr: [f64; PARAM_COUNT] = values
            .try_into()
            .map_err(|v: Vec<f64>| PyValueError::new_err(format!("expected 12 values, got {}", v.len())))?;
        Ok(PyScenario { inner: self.inner.with_parameters(&ParameterVector(arr)).map_err(err)? })
    }

    fn station_ids(&self) -> Vec<String> {
        self.inner.stations.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn n_stations(&self) -> usize {
        self.inner.stations.len()
    }

    fn __repr__(&self) -> String {
        let l = self.inner.source.location;
        format!(
            "Scenario(stations={}, source=({}, {}, {}))",
            self.inner.stations.len(),
            l.ns,
            l.ew,
            l.ud
        )
    }
}

/// Flattened spectra, station-major, 6 reals per frequency.
#[pyfunction]
#[pyo3(signature = (scenario, count=205, f_max=5.0, band=Some((0.1, 1.0))))]
fn simulate(
    py: Python<'_>,
    scenario: &PyScenario,
    count: usize,
    f_max: f64,
    band: Option<(f64, f64)>,
) -> PyResult<Vec<f64>> {
    let g = grid(count, f_max)?;
    let b = self::band(band)?;
    let s = &scenario.inner;
    py.detach(|| {
        let w = ReferenceModel::default().simulate(&s.layer_model(), &s.source, &s.stations, &g)?;
        match b {
            Some(b) => b.apply(&w).map(|w| w.flatten()),
            None => Ok(w.flatten()),
        }
    })
    .map_err(err)
}

/// Arrival-time change across a `2 * delta` velocity change, in seconds.
#[pyfunction]
#[pyo3(signature = (layer, wave, delta, scenario=None))]
fn arrival_time_difference(layer: usize, wave: &str, delta: f64, scenario: Option<&PyScenario>) -> PyResult<f64> {
    let kind = match wave {
        "P" | "p" => WaveKind::P,
        "S" | "s" => WaveKind::S,
        _ => return Err(PyValueError::new_err(format!("wave must be 'P' or 'S', got {wave:?}"))),
    };
    let layers = scenario.map(|s| s.inner.layer_model()).unwrap_or_else(model::Scenario::kanto_layers);
    atd(&layers, layer, kind, delta).map_err(err)
}

/// Normalized sensitivity matrix of a scenario.
#[pyclass(name = "SensitivityMatrix", module = "wavefield_doe_py", frozen)]
struct PySensitivity {
    inner: sensitivity::SensitivityMatrix,
    candidates: Candidates,
}

#[pymethods]
impl PySensitivity {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.normalized.shape()
    }

    /// Row-major entries of the normalized matrix.
    fn normalized(&self) -> Vec<f64> {
        self.inner.normalized.transpose().as_slice().to_vec()
    }

    /// Per-site, per-parameter scalar sensitivity.
    fn site_sensitivities(&self) -> Vec<Vec<f64>> {
        self.inner.site_sensitivities().iter().map(|r| r.to_vec()).collect()
    }

    fn station_ids(&self) -> Vec<String> {
        self.inner.station_ids.clone()
    }

    fn default_epsilon(&self) -> f64 {
        self.candidates.default_epsilon()
    }

    /// `det(sum W_j^T W_j + eps I)` over 0-based `sites`.
    #[pyo3(signature = (sites, epsilon=None))]
    fn objective(&self, sites: Vec<usize>, epsilon: Option<f64>) -> PyResult<f64> {
        let n = self.candidates.len();
        if let Some(&j) = sites.iter().find(|&&j| j >= n) {
            return Err(PyValueError::new_err(format!("site {j} out of range")));
        }
        let eps = epsilon.unwrap_or_else(|| self.candidates.default_epsilon());
        self.candidates.objective(&sites, eps).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (scenario, count=205, f_max=5.0, band=Some((0.1, 1.0)), structure_fraction=0.1, location_km=0.5))]
fn build_sensitivity(
    py: Python<'_>,
    scenario: &PyScenario,
    count: usize,
    f_max: f64,
    band: Option<(f64, f64)>,
    structure_fraction: f64,
    location_km: f64,
) -> PyResult<PySensitivity> {
    let g = grid(count, f_max)?;
    let b = self::band(band)?;
    let s = &scenario.inner;
    let pspec = PerturbationSpec::uniform(structure_fraction, location_km);
    py.detach(|| {
        let inner = sensitivity::build_sensitivity(&ReferenceModel::default(), s, &g, b, &pspec)?;
        let candidates = Candidates::from_sensitivity(&inner)?;
        Ok(PySensitivity { inner, candidates })
    })
    .map_err(err)
}

/// Greedy D-optimal selection of `p` sites.
#[pyfunction]
#[pyo3(signature = (matrix, p, epsilon=None))]
fn greedy_select<'py>(
    py: Python<'py>,
    matrix: &PySensitivity,
    p: usize,
    epsilon: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let eps = epsilon.unwrap_or_else(|| matrix.candidates.default_epsilon());
    let r = py.detach(|| greedy(&matrix.candidates, p, eps)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("selected", &r.selected)?;
    d.set_item(
        "station_ids",
        r.selected.iter().map(|&j| matrix.inner.station_ids[j].clone()).collect::<Vec<_>>(),
    )?;
    d.set_item("objective_trace", &r.objective_trace)?;
    d.set_item("epsilon", r.epsilon)?;
    Ok(d)
}

/// `||truth - reconstructed|| / ||truth||` over flat vectors.
#[pyfunction]
fn reconstruction_error(truth: Vec<f64>, reconstructed: Vec<f64>) -> PyResult<f64> {
    relative_error(&truth, &reconstructed).map_err(err)
}

fn overrides(out: Option<PathBuf>, seed_truth: Option<u64>, seed_noise: Option<u64>) -> Overrides {
    Overrides { out, seed_truth, seed_noise, ..Default::default() }
}

/// Twin experiment from a config file, in memory.
#[pyfunction]
#[pyo3(signature = (config, seed_truth=None, seed_noise=None))]
fn run_twin<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed_truth: Option<u64>,
    seed_noise: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let x = Experiment::load(&config, &overrides(None, seed_truth, seed_noise)).map_err(err)?;
    let out = py.detach(|| x.twin()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("config_hash", &x.hash)?;
    d.set_item(
        "selected",
        out.selection
            .selected
            .iter()
            .map(|&j| x.scenario.stations.as_slice()[j].id.clone())
            .collect::<Vec<_>>(),
    )?;
    d.set_item("true_parameters", out.truth.parameters.0.to_vec())?;
    d.set_item("estimated_parameters", out.trace.final_parameters().0.to_vec())?;
    d.set_item("initial_error", out.initial_error)?;
    d.set_item("final_error", out.final_error)?;
    d.set_item("iterations", out.trace.last().iteration)?;
    d.set_item("converged", out.trace.converged)?;
    d.set_item(
        "residual_norms",
        out.trace.iterations.iter().map(|r| r.residual_norm).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Random-subset baseline from a config file, in memory.
#[pyfunction]
#[pyo3(signature = (config, seed_truth=None, seed_noise=None))]
fn run_baseline<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed_truth: Option<u64>,
    seed_noise: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let x = Experiment::load(&config, &overrides(None, seed_truth, seed_noise)).map_err(err)?;
    let (_, rows) = py.detach(|| x.baseline()).map_err(err)?;
    let stats = BaselineStats::of(&rows);
    let d = PyDict::new(py);
    d.set_item(
        "final_errors",
        rows.iter()
            .map(|r| r.outcome.as_ref().ok().map(|o| o.final_error))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("mean", stats.mean)?;
    d.set_item("min", stats.min)?;
    d.set_item("max", stats.max)?;
    d.set_item("failed", stats.failed)?;
    Ok(d)
}

/// Run a CLI command (`sensitivity`, `select`, `twin`, `baseline`) and
/// return `(stdout text, run directory)`.
#[pyfunction]
#[pyo3(signature = (command, config, out=None, seed_truth=None, seed_noise=None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config: PathBuf,
    out: Option<PathBuf>,
    seed_truth: Option<u64>,
    seed_noise: Option<u64>,
) -> PyResult<(String, PathBuf)> {
    let f = match command {
        "sensitivity" => experiment::cmd_sensitivity,
        "select" => experiment::cmd_select,
        "twin" => experiment::cmd_twin,
        "baseline" => experiment::cmd_baseline,
        _ => return Err(PyValueError::new_err(format!("unknown command {command:?}"))),
    };
    let x = Experiment::load(&config, &overrides(out, seed_truth, seed_noise)).map_err(err)?;
    let r = py.detach(|| f(&x)).map_err(err)?;
    Ok((r.text, r.run_dir))
}

#[pymodule]
fn wavefield_doe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PARAMETER_NAMES", PARAMETER_NAMES.to_vec())?;
    m.add("TOOL_VERSION", experiment::TOOL_VERSION)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySensitivity>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(arrival_time_difference, m)?)?;
    m.add_function(wrap_pyfunction!(build_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_select, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_twin, m)?)?;
    m.add_function(wrap_pyfunction!(run_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
