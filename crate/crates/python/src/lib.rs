//! Python module `manifold_mpc`. Matrices cross the boundary as nested lists.

use manifold_mpc_core::config::RunConfig;
use manifold_mpc_core::experiments::{run_suite, Suite};
use manifold_mpc_core::io::DesignDocument;
use manifold_mpc_core::lgvi::{InertiaMatrix, Lgvi as CoreLgvi, SpacecraftState};
use manifold_mpc_core::mpc::closed_loop;
use manifold_mpc_core::so3::{exp_so3, geodesic_distance as core_distance, log_so3_with, BranchConvention, RotationMatrix};
use manifold_mpc_core::terminal::TerminalDesign as CoreDesign;
use manifold_mpc_core::Error;
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter { .. }
        | Error::NotRotation { .. }
        | Error::NotSkew { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix3<f64>> {
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
        return Err(PyValueError::new_err("expected a 3×3 nested list"));
    }
    Ok(Matrix3::from_fn(|i, j| rows[i][j]))
}

fn rows(m: &Matrix3<f64>) -> Rows {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

fn vector(v: &[f64]) -> PyResult<Vector3<f64>> {
    if v.len() != 3 {
        return Err(PyValueError::new_err("expected 3 values"));
    }
    Ok(Vector3::from_column_slice(v))
}

fn rotation(r: &Rows) -> PyResult<RotationMatrix> {
    RotationMatrix::new(matrix(r)?).map_err(to_py)
}

fn state(g: &Rows, f: &Rows) -> PyResult<SpacecraftState> {
    Ok(SpacecraftState::new(rotation(g)?, rotation(f)?))
}

fn convention(name: &str) -> PyResult<BranchConvention> {
    match name {
        "non_negative" => Ok(BranchConvention::NonNegative),
        "non_positive" => Ok(BranchConvention::NonPositive),
        other => Err(PyValueError::new_err(format!(
            "unknown branch convention `{other}`; expected non_negative or non_positive"
        ))),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

#[pyfunction]
fn so3_exp(v: Vec<f64>) -> PyResult<Rows> {
    Ok(rows(exp_so3(&vector(&v)?).matrix()))
}

#[pyfunction]
#[pyo3(signature = (r, branch = "non_negative"))]
fn so3_log(r: Rows, branch: &str) -> PyResult<Vec<f64>> {
    Ok(log_so3_with(&rotation(&r)?, convention(branch)?).vector().as_slice().to_vec())
}

#[pyfunction]
fn geodesic_distance(r1: Rows, r2: Rows) -> PyResult<f64> {
    Ok(core_distance(&rotation(&r1)?, &rotation(&r2)?))
}

/// Run configuration; defaults reproduce the reference scenario.
#[pyclass]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_json_str(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_value().to_string()
    }
}

/// Variational integrator with inertia `J` and step `h`.
#[pyclass]
struct Lgvi {
    inner: CoreLgvi,
}

#[pymethods]
impl Lgvi {
    #[new]
    fn new(inertia: Rows, h: f64) -> PyResult<Self> {
        let j = InertiaMatrix::new(matrix(&inertia)?).map_err(to_py)?;
        Ok(Self { inner: CoreLgvi::new(j, h).map_err(to_py)? })
    }

    /// Returns `(g_next, f_next, implicit_residual)`.
    fn step(&self, g: Rows, f: Rows, tau: Vec<f64>) -> PyResult<(Rows, Rows, f64)> {
        let out = self
            .inner
            .step_checked(&state(&g, &f)?, &vector(&tau)?, 0.0)
            .map_err(to_py)?;
        Ok((rows(out.state.g.matrix()), rows(out.state.f.matrix()), out.implicit_residual))
    }

    fn spatial_momentum(&self, g: Rows, f: Rows) -> PyResult<Vec<f64>> {
        Ok(self.inner.spatial_momentum(&state(&g, &f)?).as_slice().to_vec())
    }

    /// Increment `f` for body rate `omega`.
    fn increment(&self, omega: Vec<f64>) -> PyResult<Rows> {
        let x = SpacecraftState::with_rate(RotationMatrix::identity(), &vector(&omega)?, self.inner.h);
        Ok(rows(x.f.matrix()))
    }
}

/// Terminal cost `F`, local law `κ` and level `c`.
#[pyclass]
struct TerminalDesign {
    inner: CoreDesign,
    config: serde_json::Value,
}

#[pymethods]
impl TerminalDesign {
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn compute(py: Python<'_>, config: Option<&Config>) -> PyResult<Self> {
        let config = config.map_or_else(RunConfig::default, |c| c.inner.clone());
        let inner = py.detach(|| config.design()).map_err(to_py)?;
        Ok(Self { inner, config: config.to_json_value() })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let doc: DesignDocument = serde_json::from_str(text).map_err(|e| to_py(e.into()))?;
        Ok(Self {
            inner: doc.to_design().map_err(to_py)?,
            config: doc.config.unwrap_or(serde_json::Value::Null),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        let doc = DesignDocument::from_design(&self.inner, Some(self.config.clone()));
        serde_json::to_string_pretty(&doc).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h()
    }

    #[getter(P)]
    fn p(&self) -> Rows {
        self.inner.p.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    #[getter(K)]
    fn k(&self) -> Rows {
        self.inner.k.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    #[getter]
    fn dare_residual(&self) -> f64 {
        self.inner.dare_residual
    }

    #[getter]
    fn spectral_radius(&self) -> f64 {
        self.inner.spectral_radius
    }

    fn terminal_cost(&self, g: Rows, f: Rows) -> PyResult<f64> {
        Ok(self.inner.terminal_cost(&state(&g, &f)?))
    }

    fn in_terminal_set(&self, g: Rows, f: Rows) -> PyResult<bool> {
        Ok(self.inner.in_terminal_set(&state(&g, &f)?))
    }

    fn local_law(&self, g: Rows, f: Rows) -> PyResult<Vec<f64>> {
        let tau = self.inner.local_law(&state(&g, &f)?).map_err(to_py)?;
        Ok(tau.as_slice().to_vec())
    }

    fn stage_cost(&self, g: Rows, f: Rows, tau: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.stage_cost(&state(&g, &f)?, &vector(&tau)?))
    }

    /// Worst-case margins of the local-law conditions on fresh samples.
    #[pyo3(signature = (n_samples = 1000, seed = 1, level = None))]
    fn certify<'py>(
        &self,
        py: Python<'py>,
        n_samples: usize,
        seed: u64,
        level: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let level = level.unwrap_or(self.inner.c);
        let margins = py.detach(|| {
            self.inner
                .certify_at(level, n_samples, seed, manifold_mpc_core::attitude::MIN_STEP_MARGIN)
        });
        let mut value = serde_json::to_value(margins).map_err(|e| to_py(e.into()))?;
        value["holds"] = margins.holds().into();
        json_to_py(py, &value)
    }
}

/// Closed loop from the configured initial state. Returns a dict with
/// `g`, `f` (per state), `tau`, `records` and `converged_at`.
#[pyfunction]
#[pyo3(signature = (design, config = None))]
fn simulate<'py>(py: Python<'py>, design: &TerminalDesign, config: Option<&Config>) -> PyResult<Bound<'py, PyAny>> {
    let config = config.map_or_else(RunConfig::default, |c| c.inner.clone());
    let sys = config.attitude_system(design.inner.clone());
    let run = py
        .detach(|| -> manifold_mpc_core::Result<_> {
            closed_loop(&sys, &config.initial_state()?, &config.mpc_config()?, &config.closed_loop_options())
        })
        .map_err(to_py)?;
    let value = serde_json::json!({
        "g": run.states.iter().map(|x| rows(x.g.matrix())).collect::<Vec<_>>(),
        "f": run.states.iter().map(|x| rows(x.f.matrix())).collect::<Vec<_>>(),
        "tau": run.records.iter().map(|r| r.input.clone()).collect::<Vec<_>>(),
        "records": run.records,
        "converged_at": run.converged_at,
    });
    json_to_py(py, &value)
}

/// Runs a verification suite and returns its reports as dicts.
#[pyfunction]
#[pyo3(signature = (suite, config = None, design = None))]
fn verify<'py>(
    py: Python<'py>,
    suite: &str,
    config: Option<&Config>,
    design: Option<&TerminalDesign>,
) -> PyResult<Bound<'py, PyAny>> {
    let suite: Suite = suite.parse().map_err(to_py)?;
    let config = config.map_or_else(RunConfig::default, |c| c.inner.clone());
    let reports = py
        .detach(|| run_suite(suite, &config, design.map(|d| &d.inner), None))
        .map_err(to_py)?;
    json_to_py(py, &serde_json::to_value(reports).map_err(|e| to_py(e.into()))?)
}

#[pymodule]
fn manifold_mpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(so3_exp, m)?)?;
    m.add_function(wrap_pyfunction!(so3_log, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<Config>()?;
    m.add_class::<Lgvi>()?;
    m.add_class::<TerminalDesign>()?;
    Ok(())
}
