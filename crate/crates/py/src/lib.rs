//! Python bindings: the model specification plus the deterministic solvers,
//! the simulators and the acceptance suite.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use irg_core::acceptance::{self, Profile};
use irg_core::graph::{fluctuation_ensemble, AssignmentMode, EnsembleConfig};
use irg_core::mbp::{critical_time, survival_probability, BranchingSpec};
use irg_core::mst::{mst_clt_experiment, sigma_infinity as core_sigma_infinity, DenseModel};
use irg_core::ode::{macroscopic_limits, solve_densities, DEFAULT_STEP};
use irg_core::sde::covariance_closed_form;
use irg_core::{er, Kernel, ModelSpec, TypeMeasure};

fn py_err(e: irg_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A finite-type model: kernel, type measure, optional perturbations.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    spec: ModelSpec,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kernel, measure, truncation, horizon, lambda_=None, psi=None, seed=None))]
    fn new(
        kernel: Vec<Vec<f64>>,
        measure: Vec<f64>,
        truncation: usize,
        horizon: f64,
        lambda_: Option<Vec<Vec<f64>>>,
        psi: Option<Vec<f64>>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let kernel = Kernel::new(kernel).map_err(py_err)?;
        let measure = TypeMeasure::new(measure).map_err(py_err)?;
        let k = kernel.dim();
        let lambda = match lambda_ {
            Some(rows) => Kernel::perturbation(rows).map_err(py_err)?,
            None => Kernel::zeros(k),
        };
        let mut spec = ModelSpec::with_perturbations(kernel, measure, lambda, psi.unwrap_or(vec![0.0; k]), truncation, horizon)
            .map_err(py_err)?;
        spec.seed = seed;
        Ok(PyModel { spec })
    }

    #[staticmethod]
    fn erdos_renyi(truncation: usize, horizon: f64) -> Self {
        PyModel {
            spec: ModelSpec::erdos_renyi(truncation, horizon),
        }
    }

    #[staticmethod]
    fn from_toml(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            spec: ModelSpec::from_path(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn types(&self) -> usize {
        self.spec.types()
    }

    #[getter]
    fn truncation(&self) -> usize {
        self.spec.truncation
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    fn critical_time(&self) -> PyResult<f64> {
        critical_time(&self.spec.kernel, &self.spec.measure).map_err(py_err)
    }

    /// Type vectors of the truncated slice, in rank order.
    fn type_vectors(&self) -> PyResult<Vec<Vec<u32>>> {
        let slice = irg_core::TypeSlice::new(self.spec.types(), self.spec.truncation).map_err(py_err)?;
        Ok(slice.vectors().iter().map(|v| v.counts().to_vec()).collect())
    }

    /// Limit densities `pi(l, t)` (rank-indexed) at each requested time.
    #[pyo3(signature = (times, step=DEFAULT_STEP))]
    fn densities(&self, times: Vec<f64>, step: f64) -> PyResult<Vec<Vec<f64>>> {
        let horizon = times.iter().copied().fold(0.0, f64::max);
        let field = solve_densities(&self.spec, step, horizon).map_err(py_err)?;
        times
            .iter()
            .map(|&t| field.at_time(t).map(<[f64]>::to_vec).map_err(py_err))
            .collect()
    }

    /// Limit (components, giant, surplus) densities at `t`.
    fn macroscopic(&self, t: f64) -> PyResult<(f64, f64, f64)> {
        let field = solve_densities(&self.spec, DEFAULT_STEP, t).map_err(py_err)?;
        let m = macroscopic_limits(&field, t).map_err(py_err)?;
        Ok((m.components, m.giant, m.surplus))
    }

    /// Closed-form covariance of the density fluctuations at `t`.
    fn covariance(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let field = solve_densities(&self.spec, DEFAULT_STEP, t).map_err(py_err)?;
        let c = covariance_closed_form(&field, t).map_err(py_err)?;
        Ok(c.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    /// Per-type survival probabilities of the branching process at `t`.
    #[pyo3(signature = (t, tol=1e-12))]
    fn survival(&self, t: f64, tol: f64) -> PyResult<Vec<f64>> {
        let bs = BranchingSpec::new(self.spec.kernel.clone(), self.spec.measure.clone(), t).map_err(py_err)?;
        Ok(survival_probability(&bs, tol).map_err(py_err)?.rho)
    }

    /// MST weights over `replicas` dense graphs on `n` vertices.
    #[pyo3(signature = (n, replicas, seed, model="0"))]
    fn mst_experiment<'py>(
        &self,
        py: Python<'py>,
        n: usize,
        replicas: usize,
        seed: u64,
        model: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let model: DenseModel = model.parse().map_err(py_err)?;
        let exp = py
            .detach(|| mst_clt_experiment(&self.spec, n, replicas, model, seed))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("weights", exp.replicas.iter().map(|r| r.weight).collect::<Vec<_>>())?;
        d.set_item("mean", exp.mean)?;
        d.set_item("mean_std_error", exp.mean_std_error)?;
        d.set_item("scaled_variance", exp.scaled_variance)?;
        d.set_item("max_identity_residual", exp.max_identity_residual)?;
        d.set_item("discarded", exp.discarded)?;
        Ok(d)
    }

    /// Sample means and covariances of the scaled fluctuations over an
    /// ensemble of simulated graphs.
    #[pyo3(signature = (n, replicas, times, seed, mode="iid"))]
    fn graph_ensemble<'py>(
        &self,
        py: Python<'py>,
        n: usize,
        replicas: usize,
        times: Vec<f64>,
        seed: u64,
        mode: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode: AssignmentMode = mode.parse().map_err(py_err)?;
        let config = EnsembleConfig {
            n,
            replicas,
            times,
            truncation: self.spec.truncation,
            mode,
            seed,
        };
        let s = py.detach(|| fluctuation_ensemble(&self.spec, &config)).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("times", s.times)?;
        d.set_item("mean", s.mean)?;
        d.set_item(
            "covariance",
            s.covariance
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )?;
        d.set_item("macro_mean", s.macro_mean.iter().map(|m| m.to_vec()).collect::<Vec<_>>())?;
        d.set_item(
            "macro_covariance",
            s.macro_covariance
                .iter()
                .map(|m| m.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )?;
        Ok(d)
    }

    /// Asymptotic variance of the MST weight.
    #[pyo3(signature = (truncation, tmax, grid_step=0.05))]
    fn sigma_infinity(&self, py: Python<'_>, truncation: usize, tmax: f64, grid_step: f64) -> PyResult<f64> {
        py.detach(|| core_sigma_infinity(&self.spec.kernel, self.spec.measure.mass(), truncation, tmax, grid_step))
            .map(|s| s.value)
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(types={}, truncation={}, horizon={})",
            self.spec.types(),
            self.spec.truncation,
            self.spec.horizon
        )
    }
}

/// Borel distribution `P(size = k)` for a Poisson(t) branching process.
#[pyfunction]
fn borel_pmf(t: f64, k: u64) -> f64 {
    er::borel_pmf(t, k)
}

/// Erdos-Renyi closed forms at `t`: survival, component density, giant,
/// surplus.
#[pyfunction]
fn er_curves(py: Python<'_>, t: f64) -> PyResult<Bound<'_, PyDict>> {
    let c = er::curves(t);
    let d = PyDict::new(py);
    d.set_item("rho", c.rho)?;
    d.set_item("eta", c.eta)?;
    d.set_item("giant", c.giant)?;
    d.set_item("surplus", c.surplus)?;
    d.set_item("covariance", c.sigma.map(|s| s.iter().map(|r| r.to_vec()).collect::<Vec<_>>()))?;
    Ok(d)
}

/// Janson's series for the Erdos-Renyi MST variance.
#[pyfunction]
#[pyo3(signature = (cap=200))]
fn janson_sigma2(cap: usize) -> f64 {
    er::janson_sigma2(cap).value
}

/// Run the acceptance suite; returns `(id, name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (quick=true, seed=acceptance::DEFAULT_SEED))]
fn run_acceptance(py: Python<'_>, quick: bool, seed: u64) -> Vec<(usize, String, bool, String)> {
    let profile = if quick { Profile::Quick } else { Profile::Strict };
    py.detach(|| acceptance::run_all(profile, seed))
        .into_iter()
        .map(|r| (r.id, r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn irglab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(borel_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(er_curves, m)?)?;
    m.add_function(wrap_pyfunction!(janson_sigma2, m)?)?;
    m.add_function(wrap_pyfunction!(run_acceptance, m)?)?;
    Ok(())
}
