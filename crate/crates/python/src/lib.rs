//! Python bindings: experiments, checkpoints, the MDP solver and RLVC on
//! user-supplied databases.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rlvc::classifier::Backend;
use rlvc::environments::car::{Car as CoreCar, CarConfig, CarState};
use rlvc::harness::{Experiment as CoreExperiment, ExperimentConfig};
use rlvc::mdp::{self, FiniteMdp, Interaction, PerceptId};
use rlvc::percept::{SymbolPoint, SymbolizedPercept};
use rlvc::rlvc_loop::{self, RlvcConfig, RlvcModel, TrainingData};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn symbolized(points: Vec<(f64, f64, u32)>) -> SymbolizedPercept {
    SymbolizedPercept::new(points.into_iter().map(|(x, y, symbol)| SymbolPoint { x, y, symbol }).collect())
}

/// A learned mapping from percepts to visual classes with its Q table.
#[pyclass(module = "rlvc_py", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: RlvcModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        RlvcModel::from_text(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    /// Class id of a percept given as `(x, y, symbol)` points.
    fn classify(&self, points: Vec<(f64, f64, u32)>) -> PyResult<u32> {
        self.inner.classify(&symbolized(points)).map(|c| c.0).map_err(runtime_err)
    }

    fn action(&self, points: Vec<(f64, f64, u32)>) -> PyResult<usize> {
        self.inner.action(&symbolized(points)).map_err(runtime_err)
    }

    fn value(&self, points: Vec<(f64, f64, u32)>) -> PyResult<f64> {
        self.inner.value(&symbolized(points)).map_err(runtime_err)
    }

    /// Q rows in the order of `class_ids`.
    fn q_table(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_classes()).map(|i| self.inner.q.row(i).to_vec()).collect()
    }

    #[getter]
    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids.iter().map(|c| c.0).collect()
    }

    fn __repr__(&self) -> String {
        format!("Model(classes={}, actions={})", self.inner.n_classes(), self.inner.n_actions())
    }
}

/// Result of a training run.
#[pyclass(module = "rlvc_py", get_all)]
struct TrainResult {
    model: Model,
    trace_csv: String,
    converged: bool,
    tau: f64,
    final_max_variance: f64,
}

/// One configured task (TOML text) with its seed.
#[pyclass(module = "rlvc_py")]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config, seed = 1))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let config = ExperimentConfig::from_toml(config).map_err(value_err)?;
        CoreExperiment::new(config, seed).map(|inner| Self { inner }).map_err(value_err)
    }

    fn train(&self, py: Python<'_>) -> PyResult<TrainResult> {
        let out = py.detach(|| self.inner.train()).map_err(runtime_err)?;
        Ok(TrainResult {
            converged: out.outcome.converged,
            tau: out.outcome.tau,
            final_max_variance: out.outcome.final_max_variance,
            model: Model { inner: out.outcome.model },
            trace_csv: out.trace_csv,
        })
    }

    /// Evaluation report of a model, as CSV.
    fn evaluate(&self, py: Python<'_>, model: &Model) -> PyResult<String> {
        py.detach(|| self.inner.evaluate(&model.inner)).map(|r| r.to_csv()).map_err(runtime_err)
    }

    /// Evaluation report of the direct-perception baseline, as CSV.
    fn baseline(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| {
            let b = self.inner.baseline()?;
            self.inner.evaluate_baseline(&b)
        })
        .map(|r| r.to_csv())
        .map_err(runtime_err)
    }

    /// Value grid of a model, as CSV.
    fn export(&self, model: &Model) -> PyResult<String> {
        self.inner.export(&model.inner).map_err(runtime_err)
    }
}

/// Optimal Q of a finite MDP.
///
/// `transitions[s][a]` is `(reward, [(next, probability), ...])`; states in
/// `terminal` are absorbing with zero reward.
#[pyfunction]
#[pyo3(signature = (transitions, discount, terminal = Vec::new(), tolerance = mdp::DEFAULT_TOLERANCE))]
fn solve_optimal_q(
    transitions: Vec<Vec<(f64, Vec<(usize, f64)>)>>,
    discount: f64,
    terminal: Vec<usize>,
    tolerance: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let n = transitions.len();
    let m = transitions.first().map_or(0, Vec::len);
    let mut mdp = FiniteMdp::new(n, m, discount).map_err(value_err)?;
    for (s, row) in transitions.iter().enumerate() {
        if row.len() != m {
            return Err(PyValueError::new_err(format!("state {s} has {} actions, expected {m}", row.len())));
        }
        for (a, (r, dist)) in row.iter().enumerate() {
            mdp.set_transition(s, a, *r, dist).map_err(value_err)?;
        }
    }
    for s in terminal {
        mdp.set_terminal(s).map_err(value_err)?;
    }
    let q = mdp::solve_optimal_q(&mdp, tolerance).map_err(runtime_err)?;
    Ok((0..n).map(|s| q.row(s).to_vec()).collect())
}

/// Runs RLVC on a static database.
///
/// `percepts` are lists of `(x, y, symbol)` points; `interactions` are
/// `(s, a, r, s_next, terminal_next)` with percept indices.
#[pyfunction]
#[pyo3(signature = (percepts, interactions, n_actions, n_symbols, discount, tau = None, backend = "tree", max_iterations = 100))]
#[allow(clippy::too_many_arguments)]
fn run_rlvc(
    py: Python<'_>,
    percepts: Vec<Vec<(f64, f64, u32)>>,
    interactions: Vec<(u32, usize, f64, u32, bool)>,
    n_actions: usize,
    n_symbols: usize,
    discount: f64,
    tau: Option<f64>,
    backend: &str,
    max_iterations: usize,
) -> PyResult<TrainResult> {
    let backend = match backend {
        "tree" => Backend::Tree,
        "bdd" => Backend::Bdd,
        other => return Err(PyValueError::new_err(format!("unknown backend {other:?}"))),
    };
    let data = TrainingData {
        percepts: percepts.into_iter().map(symbolized).collect(),
        interactions: interactions
            .into_iter()
            .map(|(s, a, r, s_next, terminal_next)| Interaction {
                s: PerceptId(s),
                a,
                r,
                s_next: PerceptId(s_next),
                terminal_next,
            })
            .collect(),
        n_actions,
        n_symbols,
        discount,
    };
    let config = RlvcConfig {
        tau,
        backend,
        max_iterations,
        ..RlvcConfig::default()
    };
    let outcome = py.detach(|| rlvc_loop::run_rlvc(&data, &config)).map_err(runtime_err)?;
    Ok(TrainResult {
        trace_csv: rlvc_loop::trace_to_csv(&outcome.trace),
        converged: outcome.converged,
        tau: outcome.tau,
        final_max_variance: outcome.final_max_variance,
        model: Model { inner: outcome.model },
    })
}

/// One step of the car on the hill with default physics: returns
/// `(p, s, reward, terminal)`. Action 0 pushes left, 1 pushes right.
#[pyfunction]
fn car_step(p: f64, s: f64, action: usize) -> PyResult<(f64, f64, f64, bool)> {
    if action > 1 {
        return Err(PyValueError::new_err("action must be 0 or 1"));
    }
    let car = CoreCar::new(&CarConfig::default(), 0).map_err(runtime_err)?;
    let t = car.car_step(CarState { p, s }, action);
    Ok((t.next.p, t.next.s, t.reward, t.terminal))
}

#[pymodule]
fn rlvc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<TrainResult>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(solve_optimal_q, m)?)?;
    m.add_function(wrap_pyfunction!(run_rlvc, m)?)?;
    m.add_function(wrap_pyfunction!(car_step, m)?)?;
    Ok(())
}
