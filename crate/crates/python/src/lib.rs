//! Python bindings: grids, the stationary solvers, distance fields and
//! config-driven runs. Structured results come back as plain dicts.

use std::path::PathBuf;

use gradvi::elliptic::{equivalence_report, solve_degenerate, solve_vi, solve_vi_oracle, Tolerances};
use gradvi::evolution::{solve_parabolic_vi, ParabolicProblem, StepSettings, TimeDependent};
use gradvi::geodesic::weighted_distance;
use gradvi::io::{parse_config_with, run};
use gradvi::{BoundField, Error, PenaltyParams, ScalarField};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pygradvi, CertificateInconsistency, PyRuntimeError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::CertificateInconsistency(_) => CertificateInconsistency::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Serializes through JSON into Python dicts, lists and floats.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A scalar broadcast over the grid or explicit values.
#[derive(FromPyObject)]
enum Data {
    Scalar(f64),
    Values(Vec<f64>),
}

impl Data {
    fn nodes(&self, grid: &gradvi::Grid) -> PyResult<ScalarField> {
        let f = match self {
            Self::Scalar(v) => ScalarField::constant(grid, *v),
            Self::Values(v) => ScalarField(v.clone()),
        };
        f.check(grid).map_err(py_err)?;
        Ok(f)
    }

    fn bound(&self, grid: &gradvi::Grid) -> PyResult<BoundField> {
        let g = match self {
            Self::Scalar(v) => BoundField::constant(grid, *v),
            Self::Values(v) => BoundField::from_samples(v.clone()),
        }
        .map_err(py_err)?;
        g.check(grid).map_err(py_err)?;
        Ok(g)
    }
}

/// Uniform 1D or 2D node grid.
#[pyclass(frozen, skip_from_py_object, name = "Grid")]
#[derive(Clone)]
struct PyGrid {
    inner: gradvi::Grid,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn interval(a: f64, b: f64, nodes: usize) -> PyResult<Self> {
        Ok(Self { inner: gradvi::Grid::interval(a, b, nodes).map_err(py_err)? })
    }

    #[staticmethod]
    fn rectangle(lower: [f64; 2], upper: [f64; 2], nodes: [usize; 2]) -> PyResult<Self> {
        Ok(Self { inner: gradvi::Grid::rectangle(lower, upper, nodes).map_err(py_err)? })
    }

    #[staticmethod]
    fn unit_square(n: usize) -> PyResult<Self> {
        Ok(Self { inner: gradvi::Grid::unit_square(n).map_err(py_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn cell_count(&self) -> usize {
        self.inner.cell_count()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h()
    }

    fn node_coords(&self) -> Vec<(f64, f64)> {
        (0..self.inner.node_count()).map(|n| self.inner.node_coords(n)).map(|x| (x[0], x[1])).collect()
    }

    fn cell_centers(&self) -> Vec<(f64, f64)> {
        (0..self.inner.cell_count()).map(|c| self.inner.cell_center(c)).map(|x| (x[0], x[1])).collect()
    }

    fn __repr__(&self) -> String {
        let [nx, ny] = self.inner.node_counts();
        match self.inner.dim() {
            1 => format!("Grid(interval, nodes={nx}, h={})", self.inner.h()),
            _ => format!("Grid(rectangle, nodes=({nx}, {ny}), h={})", self.inner.h()),
        }
    }
}

/// Stationary problem −δΔ_p u = f subject to |∇u| ≤ g, u = 0 on the boundary.
#[pyclass(frozen, name = "EllipticProblem")]
struct PyEllipticProblem {
    inner: gradvi::elliptic::EllipticProblem,
}

fn penalty(eps_end: f64) -> PyResult<PenaltyParams> {
    PenaltyParams::continuation(1e-1, eps_end, 10.0).map_err(py_err)
}

#[pymethods]
impl PyEllipticProblem {
    /// `f` is nodal and `g` per cell; either may be a scalar.
    #[new]
    #[pyo3(signature = (grid, f, g, delta = 1.0, p = 2.0))]
    fn new(grid: &PyGrid, f: Data, g: Data, delta: f64, p: f64) -> PyResult<Self> {
        let grid = grid.inner.clone();
        let (f, g) = (f.nodes(&grid)?, g.bound(&grid)?);
        let inner = gradvi::elliptic::EllipticProblem::new(grid, p, delta, f, g).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// method: penalty | oracle | degenerate. Returns u, lambda, diagnostics.
    #[pyo3(signature = (method = "penalty", eps_end = 1e-6))]
    fn solve(&self, py: Python<'_>, method: &str, eps_end: f64) -> PyResult<Py<PyAny>> {
        let params = penalty(eps_end)?;
        let tol = Tolerances::default();
        let sol = py
            .detach(|| match method {
                "penalty" => solve_vi(&self.inner, &params, &tol),
                "oracle" => solve_vi_oracle(&self.inner, &tol),
                "degenerate" => {
                    let deltas: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
                    solve_degenerate(&self.inner, &deltas, &params, &tol, 1e-6).map(|r| r.0)
                }
                other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
            })
            .map_err(py_err)?;
        to_py(py, &sol)
    }

    /// Gaps between the variational, double-obstacle and complementarity solutions (p = 2).
    #[pyo3(signature = (eps_end = 1e-6))]
    fn equivalence_report(&self, py: Python<'_>, eps_end: f64) -> PyResult<Py<PyAny>> {
        let params = penalty(eps_end)?;
        let rep = py.detach(|| equivalence_report(&self.inner, &params, &Tolerances::default())).map_err(py_err)?;
        to_py(py, &rep)
    }

    fn objective(&self, u: Vec<f64>) -> PyResult<f64> {
        ScalarField(u.clone()).check(&self.inner.grid).map_err(py_err)?;
        Ok(self.inner.objective(&u))
    }
}

/// Weighted geodesic distance to the boundary with per-cell weights g.
#[pyfunction]
fn distance(grid: &PyGrid, g: Data) -> PyResult<Vec<f64>> {
    let g = g.bound(&grid.inner)?;
    Ok(weighted_distance(&g, &grid.inner).map_err(py_err)?.values.0)
}

/// Implicit-Euler evolution VI with time-independent data. Returns times,
/// snapshots and per-step diagnostics.
#[pyfunction]
#[pyo3(signature = (grid, f, g, horizon, tau, delta = 1.0, p = 2.0, u0 = None))]
#[allow(clippy::too_many_arguments)]
fn solve_parabolic(
    py: Python<'_>,
    grid: &PyGrid,
    f: Data,
    g: Data,
    horizon: f64,
    tau: f64,
    delta: f64,
    p: f64,
    u0: Option<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let grid = grid.inner.clone();
    let u0 = match u0 {
        Some(v) => Data::Values(v).nodes(&grid)?,
        None => ScalarField::zeros(&grid),
    };
    let problem = ParabolicProblem {
        f: TimeDependent::Constant(f.nodes(&grid)?),
        g: TimeDependent::Constant(g.bound(&grid)?),
        grid,
        p,
        delta,
        u0,
        horizon,
        tau,
    };
    let sol = py.detach(|| solve_parabolic_vi(&problem, &StepSettings::default())).map_err(py_err)?;
    to_py(py, &sol)
}

/// Parses a TOML run configuration; raises ValueError listing every problem.
#[pyfunction]
#[pyo3(signature = (text, overrides = Vec::new()))]
fn parse_config(py: Python<'_>, text: &str, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    to_py(py, &parse_config_with(text, &overrides).map_err(py_err)?)
}

/// Runs a configuration into `out_dir`; returns (exit_code, summary).
#[pyfunction]
#[pyo3(signature = (text, out_dir, overrides = Vec::new()))]
fn run_config(py: Python<'_>, text: &str, out_dir: PathBuf, overrides: Vec<String>) -> PyResult<(i32, Py<PyAny>)> {
    let cfg = parse_config_with(text, &overrides).map_err(py_err)?;
    let b = py.detach(|| run(&cfg, &out_dir));
    Ok((b.status.code(), to_py(py, &b.summary)?))
}

#[pymodule]
fn pygradvi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyEllipticProblem>()?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(solve_parabolic, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add("CertificateInconsistency", m.py().get_type::<CertificateInconsistency>())?;
    Ok(())
}
