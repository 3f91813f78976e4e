//! Python bindings: models, samplers, estimators, Wasserstein diagnostics
//! and the experiment runners.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use smom_core::estimators::{improved_estimator, score_matching_any, Anchor, EstimateRecord, ImprovementConfig};
use smom_core::experiments::{self as exps, Experiment, ExperimentConfig};
use smom_core::models::{self, ModelSpec};
use smom_core::numerics::{Mat, RngStream};
use smom_core::stein::apply_stein;
use smom_core::vector_fields::{mlp_field, VectorFieldSpec};
use smom_core::wasserstein::{self as ws, WScore};
use smom_core::{samplers, Error};

create_exception!(smom, SmomError, PyException);

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(m) => PyValueError::new_err(m),
        other => SmomError::new_err(other.to_string()),
    }
}

fn square(rows: Rows) -> PyResult<Mat> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a square matrix"));
    }
    Ok(Mat::from_rows(&rows))
}

fn mat_rows(m: &Mat) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A statistical model with a reference parameter.
#[pyclass(name = "Model", module = "smom", frozen)]
struct PyModel(ModelSpec);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn generalized_normal(beta: u32) -> PyResult<Self> {
        models::generalized_normal(beta).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn generalized_gamma(beta: u32) -> PyResult<Self> {
        models::generalized_gamma(beta).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn normal(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> PyResult<Self> {
        models::multivariate_normal(&mu, &square(sigma)?).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (p=3, shape=None))]
    fn ppi(p: usize, shape: Option<Vec<f64>>) -> PyResult<Self> {
        let shape = shape.unwrap_or_else(|| vec![-0.5; p]);
        models::ppi_model(&shape, p).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (p=3, k=2))]
    fn bingham(p: usize, k: usize) -> PyResult<Self> {
        models::matrix_bingham(p, k).map(Self).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.0.param_names()
    }

    #[getter]
    fn reference_theta(&self) -> Vec<f64> {
        self.0.reference_theta().to_vec()
    }

    #[getter]
    fn domain(&self) -> String {
        self.0.domain().name()
    }

    fn log_unnorm(&self, theta: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        self.0.log_unnorm(&theta, &x).map_err(py_err)
    }

    fn grad_x_log(&self, theta: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_x_log(&theta, &x).map_err(py_err)
    }

    /// Draws `n` points at `theta` (the reference parameter by default).
    #[pyo3(signature = (n, seed, theta=None, stream=0))]
    fn sample(&self, n: usize, seed: u64, theta: Option<Vec<f64>>, stream: u64) -> PyResult<Vec<Vec<f64>>> {
        let theta = theta.unwrap_or_else(|| self.0.reference_theta().to_vec());
        samplers::sample(&self.0, &theta, n, &mut RngStream::new(seed, stream)).map_err(py_err)
    }

    fn score_matching(&self, data: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        score_matching_any(&self.0, &data).map(|r| r.theta).map_err(py_err)
    }

    /// Variance-improved SMoM with `k` random MLP fields. Returns a dict
    /// with the estimate and its diagnostics.
    #[pyo3(signature = (data, k, seed, anchor="plugin", mc_size=1000))]
    fn improved<'py>(
        &self,
        py: Python<'py>,
        data: Vec<Vec<f64>>,
        k: usize,
        seed: u64,
        anchor: &str,
        mc_size: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let anchor = match anchor {
            "plugin" => Anchor::PlugIn,
            "oracle" => Anchor::Oracle(self.0.reference_theta().to_vec()),
            other => return Err(PyValueError::new_err(format!("unknown anchor '{other}'"))),
        };
        let fields: Vec<VectorFieldSpec> =
            (0..k).map(|a| mlp_field(self.0.domain(), &mut RngStream::derive(seed, &[a as u64]))).collect();
        let config = ImprovementConfig { anchor, raw_fields: &fields, mc_size };
        let mut rng = RngStream::derive(seed, &[k as u64, u64::MAX]);
        let rec = improved_estimator(&self.0, &data, &config, &mut rng).map_err(py_err)?;
        record_dict(py, &rec)
    }

    /// Stein operator of a random MLP field (identified by its seed) at `x`.
    fn stein_mlp(&self, theta: Vec<f64>, field_seed: u64, x: Vec<f64>) -> PyResult<f64> {
        let field = mlp_field(self.0.domain(), &mut RngStream::new(field_seed, 0));
        apply_stein(&self.0, &theta, &field, &x).map(|s| s.value).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?})", self.0.family())
    }
}

fn record_dict<'py>(py: Python<'py>, rec: &EstimateRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let diag = &rec.diagnostics;
    d.set_item("name", &rec.name)?;
    d.set_item("theta", &rec.theta)?;
    d.set_item("k_used", diag.k_used)?;
    d.set_item("fallback", diag.fallback)?;
    d.set_item("failure", &diag.failure)?;
    d.set_item("condition", diag.condition)?;
    d.set_item("are", &diag.are)?;
    Ok(d)
}

/// Wasserstein score of a model with a closed-form solution.
#[pyclass(name = "WassersteinScore", module = "smom", frozen)]
struct PyWScore {
    model: ModelSpec,
    score: WScore,
}

#[pymethods]
impl PyWScore {
    #[new]
    #[pyo3(signature = (model, theta=None))]
    fn new(model: &PyModel, theta: Option<Vec<f64>>) -> PyResult<Self> {
        let theta = theta.unwrap_or_else(|| model.0.reference_theta().to_vec());
        let score = ws::wscore_for(&model.0, &theta).map_err(py_err)?;
        Ok(Self { model: model.0.clone(), score })
    }

    fn eval(&self, j: usize, x: Vec<f64>) -> f64 {
        self.score.eval(j, &x)
    }

    fn grad(&self, j: usize, x: Vec<f64>) -> Vec<f64> {
        self.score.grad(j, &x)
    }

    fn pde_residual(&self, j: usize, x: Vec<f64>) -> PyResult<f64> {
        ws::pde_residual(&self.model, self.score.theta(), &self.score, j, &x).map_err(py_err)
    }

    /// Largest relative residual of the Fisher scores regressed on the
    /// Wasserstein scores.
    #[pyo3(signature = (m=2000, seed=0))]
    fn span_residual(&self, m: usize, seed: u64) -> PyResult<f64> {
        let mut rng = RngStream::new(seed, 0);
        ws::efficiency_span_test(&self.model, self.score.theta(), &self.score, m, &mut rng)
            .map(|f| f.residual)
            .map_err(py_err)
    }

    /// Monte Carlo `gap / AVar[SM]` per parameter.
    #[pyo3(signature = (m=100_000, seed=0))]
    fn relative_gap(&self, m: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = RngStream::new(seed, 0);
        ws::mle_sm_gap(&self.model, self.score.theta(), &self.score, m, &mut rng)
            .map(|g| g.relative_gap())
            .map_err(py_err)
    }

    /// Monte Carlo gap matrix and its entrywise standard errors.
    #[pyo3(signature = (m=100_000, seed=0))]
    fn gap(&self, m: usize, seed: u64) -> PyResult<(Rows, Rows)> {
        let mut rng = RngStream::new(seed, 0);
        let g = ws::mle_sm_gap(&self.model, self.score.theta(), &self.score, m, &mut rng).map_err(py_err)?;
        Ok((mat_rows(&g.gap), mat_rows(&g.gap_se)))
    }
}

/// `AVar[MLE] / AVar[SM]` for the generalized normal with shape β.
#[pyfunction]
fn are_closed_form(beta: u32) -> PyResult<f64> {
    ws::are_closed_form(beta).map_err(py_err)
}

/// Runs an experiment and returns its CSV text. `settings` holds the same
/// keys as a config file.
#[pyfunction]
#[pyo3(signature = (experiment, settings=None))]
fn run(experiment: &str, settings: Option<Vec<(String, String)>>) -> PyResult<String> {
    let exp: Experiment = experiment.parse().map_err(py_err)?;
    let mut cfg = ExperimentConfig::new(exp);
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    let mut buf = Vec::new();
    match exp {
        Experiment::AreCurve => exps::write_csv(&exps::run_are_curve(cfg.beta_max).map_err(py_err)?, &mut buf),
        Experiment::Trace => exps::write_csv(&exps::run_trace(&cfg).map_err(py_err)?, &mut buf),
        _ => exps::write_csv(&exps::run_estimation(&cfg).map_err(py_err)?, &mut buf),
    }
    .map_err(py_err)?;
    String::from_utf8(buf).map_err(|e| SmomError::new_err(e.to_string()))
}

/// Median (min, max) table of a results CSV, as CSV text.
#[pyfunction]
fn summarize(csv_text: &str) -> PyResult<String> {
    let rows = exps::read_rows(csv_text.as_bytes()).map_err(py_err)?;
    let mut buf = Vec::new();
    exps::write_csv(&exps::summarize(&rows), &mut buf).map_err(py_err)?;
    String::from_utf8(buf).map_err(|e| SmomError::new_err(e.to_string()))
}

#[pymodule]
fn smom(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SmomError", m.py().get_type::<SmomError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyWScore>()?;
    m.add_function(wrap_pyfunction!(are_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
