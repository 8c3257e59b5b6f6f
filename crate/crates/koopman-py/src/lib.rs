//! Python bindings: configs, data generation, fitting and the learned operator.
//!
//! Matrices cross the boundary as lists of rows; kernels, systems and methods
//! use the same JSON schema as the config files.

use koopman_core::config::ExperimentConfig;
use koopman_core::dataset::{NoiseSpec, TrainingData};
use koopman_core::dynamics::{simulate as simulate_system, SystemSpec};
use koopman_core::evaluation::{fit_method, CvSettings, Fit};
use koopman_core::kernels::{gram_matrix as gram, KernelSpec, Point};
use koopman_core::linalg::{from_rows, to_rows};
use koopman_core::operator::KoopmanEstimate;
use koopman_core::solvers::{MethodSpec, SolverOptions};
use koopman_core::KoopmanError;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: KoopmanError) -> PyErr {
    match e {
        KoopmanError::Io(_) => PyIOError::new_err(e.to_string()),
        KoopmanError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("invalid {what}: {e}")))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    from_rows(&rows).map_err(err)
}

/// Kernel matrix `K[i][j] = k(xs[i], ys[j])`.
#[pyfunction]
fn gram_matrix(kernel_json: &str, xs: Vec<Point>, ys: Vec<Point>) -> PyResult<Vec<Vec<f64>>> {
    let k: KernelSpec = parse("kernel", kernel_json)?;
    Ok(to_rows(&gram(&k, &xs, &ys).map_err(err)?))
}

/// States `x_0..x_n` of a system given as JSON.
#[pyfunction]
fn simulate(system_json: &str, x0: Point, n: usize) -> PyResult<Vec<Point>> {
    let sys: SystemSpec = parse("system", system_json)?;
    Ok(simulate_system(&sys, &x0, n).map_err(err)?.states().to_vec())
}

/// Experiment manifest; `Config(name_or_path)` accepts a bundled name or a file path.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        let inner = if ExperimentConfig::bundled_names().contains(&source) {
            ExperimentConfig::bundled(source)
        } else {
            ExperimentConfig::load(std::path::Path::new(source))
        };
        Ok(PyConfig { inner: inner.map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::from_json(text).map_err(err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyConfig { inner: self.inner.clone().with_seed(seed) }
    }

    fn with_lambda(&self, lambda: f64) -> Self {
        PyConfig { inner: self.inner.clone().with_lambda(lambda) }
    }

    fn with_method(&self, name: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: self.inner.clone().with_method(name).map_err(err)? })
    }

    /// Training data at the configured noise level.
    fn training_data(&self) -> PyResult<PyData> {
        let data = self.inner.scenario().map_err(err)?.training_data(self.inner.noise_spec()).map_err(err)?;
        Ok(PyData { inner: data, opts: self.inner.solver, cv: self.inner.cv.clone() })
    }

    /// Training data for an explicit SNR and seed.
    fn noisy_data(&self, snr_db: f64, seed: u64) -> PyResult<PyData> {
        let data = self.inner.scenario().map_err(err)?.training_data(NoiseSpec { snr_db, seed }).map_err(err)?;
        Ok(PyData { inner: data, opts: self.inner.solver, cv: self.inner.cv.clone() })
    }

    /// Fits the configured method.
    fn fit(&self) -> PyResult<PyFit> {
        self.training_data()?.fit_spec(&self.inner.method)
    }
}

/// Finite matrices of a learning problem.
#[pyclass(name = "TrainingData")]
struct PyData {
    inner: TrainingData,
    opts: SolverOptions,
    cv: CvSettings,
}

impl PyData {
    fn fit_spec(&self, method: &MethodSpec) -> PyResult<PyFit> {
        let fit = fit_method(&self.inner, method, &self.opts, &self.cv).map_err(err)?;
        Ok(PyFit::from(fit))
    }
}

#[pymethods]
impl PyData {
    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.y)
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.z)
    }

    #[getter]
    fn g(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.g)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    /// Fits a method given as JSON, e.g. `{"name": "nuclear", "lambda": 0.1}`.
    fn fit(&self, method_json: &str) -> PyResult<PyFit> {
        let method: MethodSpec = parse("method", method_json)?;
        self.fit_spec(&method)
    }
}

#[pyclass(name = "Fit")]
struct PyFit {
    #[pyo3(get)]
    method: String,
    #[pyo3(get)]
    lambda: Option<f64>,
    #[pyo3(get)]
    objective: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    diagnostics: std::collections::BTreeMap<String, f64>,
    estimate: KoopmanEstimate,
}

impl From<Fit> for PyFit {
    fn from(f: Fit) -> Self {
        PyFit {
            method: f.method.label().into(),
            lambda: f.lambda,
            objective: f.result.objective,
            iterations: f.result.iterations,
            converged: f.result.converged,
            diagnostics: f.result.diagnostics,
            estimate: f.estimate,
        }
    }
}

#[pymethods]
impl PyFit {
    #[getter]
    fn estimate(&self) -> PyEstimate {
        PyEstimate { inner: self.estimate.clone() }
    }
}

/// A learned operator.
#[pyclass(name = "Estimate")]
struct PyEstimate {
    inner: KoopmanEstimate,
}

#[pymethods]
impl PyEstimate {
    #[new]
    fn new(kernel_json: &str, anchors_z: Vec<Point>, anchors_g: Vec<Point>, a: Vec<Vec<f64>>) -> PyResult<Self> {
        let k: KernelSpec = parse("kernel", kernel_json)?;
        Ok(PyEstimate { inner: KoopmanEstimate::new(k, anchors_z, anchors_g, matrix(a)?).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyEstimate { inner: KoopmanEstimate::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.a())
    }

    #[getter]
    fn b(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.b().map_err(err)?))
    }

    /// `(operator, frobenius, nuclear)` norms of `B`.
    fn norms(&self) -> PyResult<(f64, f64, f64)> {
        let n = self.inner.operator_norms().map_err(err)?;
        Ok((n.operator, n.frobenius, n.nuclear))
    }

    /// Eigenvalues as `(re, im)` pairs, largest modulus first.
    fn eigenvalues(&self) -> PyResult<Vec<(f64, f64)>> {
        Ok(self.inner.eigenvalues().map_err(err)?.iter().map(|c| (c.re, c.im)).collect())
    }

    /// `(K g_l)(x)` for a zero-based `l`.
    fn apply(&self, l: usize, x: Point) -> PyResult<f64> {
        self.inner.apply_observable(l, &x).map_err(err)
    }

    /// Predicted observable vectors for steps `0..=n`.
    fn predict(&self, x0: Point, n: usize) -> PyResult<Vec<Vec<f64>>> {
        let phis = self.inner.predict_observables(&x0, n).map_err(err)?;
        Ok(phis.iter().map(|p| p.iter().cloned().collect()).collect())
    }

    fn project(&self, w_anchors: Vec<Point>) -> PyResult<Self> {
        Ok(PyEstimate { inner: self.inner.project(&w_anchors).map_err(err)? })
    }
}

#[pymodule]
fn koopman(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gram_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyData>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyEstimate>()?;
    Ok(())
}
