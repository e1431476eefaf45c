use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use sgldfp_core::harness::{self, ExperimentConfig, ExperimentKind};
use sgldfp_core::stationary::{sgld_1d_stationary_moments, stationary_moment_expansion};
use sgldfp_core::{ChainConfig, GaussianSummary, LinRegOracle, SamplerKind};

fn err(e: sgldfp_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<SamplerKind> {
    name.parse().map_err(err)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Design matrix with one response per row.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset(sgldfp_core::Dataset);

#[pymethods]
impl Dataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        sgldfp_core::Dataset::from_rows(&x, y).map(Dataset).map_err(err)
    }

    #[getter]
    fn n_data(&self) -> usize {
        self.0.n_data()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.x_matrix())
    }

    fn y(&self) -> Vec<f64> {
        self.0.responses().to_vec()
    }

    /// Each datum repeated `k` times.
    fn replicate(&self, k: usize) -> PyResult<Self> {
        self.0.replicate(k).map(Dataset).map_err(err)
    }

    fn prefix(&self, n: usize) -> PyResult<Self> {
        self.0.prefix(n).map(Dataset).map_err(err)
    }

    fn split_at(&self, n_first: usize) -> PyResult<(Self, Self)> {
        let (a, b) = self.0.split_at(n_first).map_err(err)?;
        Ok((Dataset(a), Dataset(b)))
    }

    fn __len__(&self) -> usize {
        self.0.n_data()
    }
}

/// Bayesian linear or logistic regression posterior with a Gaussian prior.
#[pyclass(frozen)]
struct Model(sgldfp_core::PosteriorModel);

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (dataset, noise_variance=1.0, prior_variance=1.0))]
    fn linear(dataset: &Dataset, noise_variance: f64, prior_variance: f64) -> PyResult<Self> {
        sgldfp_core::PosteriorModel::linear(dataset.0.clone(), noise_variance, prior_variance).map(Model).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (dataset, prior_variance=1.0))]
    fn logistic(dataset: &Dataset, prior_variance: f64) -> PyResult<Self> {
        sgldfp_core::PosteriorModel::logistic(dataset.0.clone(), prior_variance).map(Model).map_err(err)
    }

    #[getter]
    fn n_data(&self) -> usize {
        self.0.n_data()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn with_dataset(&self, dataset: &Dataset) -> Self {
        Model(self.0.with_dataset(dataset.0.clone()))
    }

    fn potential(&self, theta: Vec<f64>) -> f64 {
        self.0.potential(&vector(&theta))
    }

    fn neg_log_likelihood(&self, theta: Vec<f64>) -> f64 {
        self.0.neg_log_likelihood(&vector(&theta))
    }

    /// Gradient of term `i`; `i = 0` is the prior.
    fn grad_datum(&self, i: usize, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_datum(i, &vector(&theta)).map(|g| g.as_slice().to_vec()).map_err(err)
    }

    fn grad_full(&self, theta: Vec<f64>) -> Vec<f64> {
        self.0.grad_full(&vector(&theta)).as_slice().to_vec()
    }

    fn hessian(&self, theta: Vec<f64>) -> Vec<Vec<f64>> {
        to_rows(&self.0.hessian_at(&vector(&theta)))
    }

    #[pyo3(signature = (tol=1e-10, max_iters=100))]
    fn find_mode(&self, tol: f64, max_iters: usize) -> PyResult<Vec<f64>> {
        self.0.find_mode(tol, max_iters).map(|t| t.as_slice().to_vec()).map_err(err)
    }

    /// `{"m", "L", "l_tilde"}`.
    fn constants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.0.lipschitz_constants().map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("m", c.m)?;
        out.set_item("L", c.l)?;
        out.set_item("l_tilde", c.l_tilde)?;
        Ok(out)
    }

    /// Closed-form posterior precision and mean (linear models only).
    fn linreg_posterior(&self) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let post = self.0.linreg_posterior_params().map_err(err)?;
        Ok((to_rows(&post.sigma), post.theta_star.as_slice().to_vec()))
    }
}

/// Runs one chain and returns its post-burn-in moments.
#[pyfunction]
#[pyo3(signature = (model, kind, gamma, init, n_iters=None, p=1, seed=0, chain_id=0, burn_in_fraction=0.1, center=None, keep_samples=false, check_step_bound=true))]
#[allow(clippy::too_many_arguments)]
fn run_chain<'py>(
    py: Python<'py>,
    model: &Model,
    kind: &str,
    gamma: f64,
    init: Vec<f64>,
    n_iters: Option<usize>,
    p: usize,
    seed: u64,
    chain_id: u64,
    burn_in_fraction: f64,
    center: Option<Vec<f64>>,
    keep_samples: bool,
    check_step_bound: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ChainConfig::new(self::kind(kind)?, gamma, init);
    if let Some(n) = n_iters {
        cfg.n_iters = n;
    }
    cfg.p = p;
    cfg.seed = seed;
    cfg.chain_id = chain_id;
    cfg.burn_in_fraction = burn_in_fraction;
    cfg.center = center;
    cfg.keep_samples = keep_samples;
    cfg.check_step_bound = check_step_bound;
    let model = &model.0;
    let out = py.detach(|| sgldfp_core::run_chain(model, &cfg)).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("mean", out.moments.mean().as_slice().to_vec())?;
    dict.set_item("cov", to_rows(&out.moments.covariance().map_err(err)?))?;
    dict.set_item("n_kept", out.n_kept)?;
    dict.set_item("final_state", out.final_state.as_slice().to_vec())?;
    dict.set_item("samples", out.samples)?;
    Ok(dict)
}

/// Exact stationary covariance of a linear-regression chain.
#[pyfunction]
#[pyo3(signature = (model, kind, gamma, p=1))]
fn linreg_stationary_cov(model: &Model, kind: &str, gamma: f64, p: usize) -> PyResult<Vec<Vec<f64>>> {
    let oracle = LinRegOracle::new(&model.0, p).map_err(err)?;
    oracle.stationary_cov(self::kind(kind)?, gamma).map(|c| to_rows(&c)).map_err(err)
}

/// Stationary variance of a scalar chain from the exact moment recursion.
#[pyfunction]
#[pyo3(signature = (model, kind, gamma, p=1))]
fn sgld_1d_stationary_variance(model: &Model, kind: &str, gamma: f64, p: usize) -> PyResult<f64> {
    sgld_1d_stationary_moments(&model.0, gamma, p, self::kind(kind)?)
        .map(|m| m.stationary_variance)
        .map_err(err)
}

/// Leading-order stationary covariance and mean bias around the mode.
#[pyfunction]
#[pyo3(signature = (model, kind, gamma, p=1))]
fn stationary_expansion<'py>(py: Python<'py>, model: &Model, kind: &str, gamma: f64, p: usize) -> PyResult<Bound<'py, PyDict>> {
    let e = stationary_moment_expansion(self::kind(kind)?, &model.0, gamma, p).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("cov", to_rows(&e.cov))?;
    dict.set_item("mean_bias", e.mean_bias.as_slice().to_vec())?;
    dict.set_item("eta", e.eta)?;
    dict.set_item("eta0", e.eta0)?;
    Ok(dict)
}

/// 2-Wasserstein distance between two Gaussians.
#[pyfunction]
fn w2_gaussian(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = GaussianSummary::analytic(vector(&mean_a), from_rows(&cov_a)?).map_err(err)?;
    let b = GaussianSummary::analytic(vector(&mean_b), from_rows(&cov_b)?).map_err(err)?;
    sgldfp_core::w2_gaussian(&a, &b).map_err(err)
}

/// Least-squares slope of log10 y on log10 x: `(slope, intercept, residual)`.
#[pyfunction]
fn fit_loglog_slope(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = sgldfp_core::fit_loglog_slope(&points).map_err(err)?;
    Ok((f.slope, f.intercept, f.residual))
}

/// Simulated logistic data; returns the dataset and the generating parameter.
#[pyfunction]
#[pyo3(signature = (n, d, seed, theta_true=None))]
fn simulate_logistic(n: usize, d: usize, seed: u64, theta_true: Option<Vec<f64>>) -> PyResult<(Dataset, Vec<f64>)> {
    let (ds, theta) = harness::simulate_logistic_dataset(n, d, seed, theta_true.as_deref()).map_err(err)?;
    Ok((Dataset(ds), theta))
}

/// Reads a libsvm file with labels mapped to {0, 1}.
#[pyfunction]
fn parse_libsvm(path: std::path::PathBuf) -> PyResult<Dataset> {
    harness::parse_libsvm(&path).map(|d| Dataset(d.dataset)).map_err(err)
}

/// Desk-scale configuration for an experiment, as JSON.
#[pyfunction]
fn desk_config(experiment: &str, seed: u64) -> PyResult<String> {
    let kind: ExperimentKind = experiment.parse().map_err(err)?;
    serde_json::to_string(&ExperimentConfig::desk(kind, seed)).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs an experiment from a JSON configuration and returns its metric rows.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let rec = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    rec.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("experiment", &r.experiment)?;
            d.set_item("kind", &r.kind)?;
            d.set_item("N", r.n)?;
            d.set_item("gamma", r.gamma)?;
            d.set_item("p", r.p)?;
            d.set_item("replicas", r.replicas)?;
            d.set_item("metric_name", &r.metric_name)?;
            d.set_item("metric_value", r.metric_value)?;
            d.set_item("stderr", r.stderr)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn sgldfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_chain, m)?)?;
    m.add_function(wrap_pyfunction!(linreg_stationary_cov, m)?)?;
    m.add_function(wrap_pyfunction!(sgld_1d_stationary_variance, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_expansion, m)?)?;
    m.add_function(wrap_pyfunction!(w2_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(fit_loglog_slope, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_logistic, m)?)?;
    m.add_function(wrap_pyfunction!(parse_libsvm, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
