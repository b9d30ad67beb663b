//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use bnnp::baselines::{elbo_of, fit, Family, FitConfig};
use bnnp::datagen::{generate_many, load_tasks, save_tasks, split, GeneratorKind, GeneratorSpec, Task};
use bnnp::eval::{bnnp_elbo, evaluate_tasks, lml_mc, Metric};
use bnnp::gaussian::Structure;
use bnnp::linalg::Mat;
use bnnp::model::NetworkConfig;
use bnnp::priors::PriorSet;
use bnnp::rng::{derive_seed, NoiseSource};
use bnnp::trainer::{load_checkpoint, save_checkpoint, train, LrSchedule, TrainConfig, TrainState};
use bnnp::BnnpError;

fn to_py(e: BnnpError) -> PyErr {
    match e {
        BnnpError::Io(io) => PyIOError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(Mat::from_fn(n, d, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse<T: std::str::FromStr<Err = BnnpError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// A collection of regression tasks.
#[pyclass(name = "TaskSet", module = "bnnp_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTaskSet {
    tasks: Vec<Task>,
}

#[pymethods]
impl PyTaskSet {
    /// Builds a set from `(x, y)` pairs; every point starts as context.
    #[new]
    fn new(data: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>) -> PyResult<Self> {
        let tasks = data
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| Task::new(to_mat(x)?, to_mat(y)?, format!("python:{i}")).map_err(to_py))
            .collect::<PyResult<_>>()?;
        Ok(Self { tasks })
    }

    /// Synthetic tasks from a preset generator.
    #[staticmethod]
    #[pyo3(signature = (kind, count, seed=0))]
    fn generate(kind: &str, count: usize, seed: u64) -> PyResult<Self> {
        let spec = GeneratorSpec::for_kind(parse::<GeneratorKind>(kind)?);
        Ok(Self { tasks: generate_many(&spec, count, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { tasks: load_tasks(&path).map_err(to_py)? })
    }

    #[pyo3(signature = (path, plain=false))]
    fn save(&self, path: PathBuf, plain: bool) -> PyResult<()> {
        save_tasks(&path, &self.tasks, plain).map_err(to_py)
    }

    /// Copy with every task split into context and target.
    fn split(&self, context_proportion: f64, seed: u64) -> PyResult<Self> {
        let tasks = self.tasks.iter().enumerate().map(|(i, t)| split(t, context_proportion, derive_seed(seed, &[i as u64]))).collect::<bnnp::Result<_>>().map_err(to_py)?;
        Ok(Self { tasks })
    }

    fn __len__(&self) -> usize {
        self.tasks.len()
    }

    /// `(x, y, context_indices, target_indices)` of task `i`.
    #[allow(clippy::type_complexity)]
    fn task(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        let t = self.tasks.get(i).ok_or_else(|| PyValueError::new_err(format!("task index {i} out of range")))?;
        Ok((from_mat(&t.x), from_mat(&t.y), t.context.clone(), t.target.clone()))
    }
}

/// A Bayesian neural network process with its optimiser state.
#[pyclass(name = "Bnnp", module = "bnnp_py")]
struct PyBnnp {
    state: TrainState,
    train_config: Option<TrainConfig>,
}

#[pymethods]
impl PyBnnp {
    /// `config_json` holds any network fields besides `widths`.
    #[new]
    #[pyo3(signature = (widths, seed=0, config_json=None))]
    fn new(widths: Vec<usize>, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut value: serde_json::Value = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => serde_json::json!({}),
        };
        value["widths"] = serde_json::json!(widths);
        let config: NetworkConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let model = bnnp::model::Bnnp::new(config, seed).map_err(to_py)?;
        Ok(Self { state: TrainState::new(model), train_config: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, cfg) = load_checkpoint(&path, None).map_err(to_py)?;
        Ok(Self { state, train_config: Some(cfg) })
    }

    /// Writes a checkpoint; models never trained get a one-step config.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let cfg = self.train_config.clone().unwrap_or_else(|| TrainConfig::new(self.state.step.max(1)));
        save_checkpoint(&path, &self.state, &cfg).map_err(to_py)
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.state.model.config).expect("config serialises")
    }

    #[getter]
    fn sigma_y(&self) -> Vec<f64> {
        self.state.model.sigma_y()
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    /// Posterior function draws at `xt` given context `(xc, yc)`:
    /// a list of `num_samples` matrices.
    #[pyo3(signature = (xc, yc, xt, num_samples=16, seed=0))]
    fn posterior_predictive(&self, xc: Vec<Vec<f64>>, yc: Vec<Vec<f64>>, xt: Vec<Vec<f64>>, num_samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let model = &self.state.model;
        let (xc, yc) = (self.input(xc)?, self.output(yc)?);
        let (_, samples) = model.infer(&xc, &yc, num_samples, NoiseSource::new(seed)).map_err(to_py)?;
        Ok(bnnp::model::predict(&model.config, &samples, &self.input(xt)?).iter().map(from_mat).collect())
    }

    /// Prior function draws at `xt`.
    #[pyo3(signature = (xt, num_samples=16, seed=0))]
    fn prior_predictive(&self, xt: Vec<Vec<f64>>, num_samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let preds = self.state.model.prior_predictive_sample(&self.input(xt)?, num_samples, NoiseSource::new(seed)).map_err(to_py)?;
        Ok(preds.iter().map(from_mat).collect())
    }

    /// `(elbo, stderr)` on a dataset treated as context.
    #[pyo3(signature = (x, y, num_samples=64, seed=0))]
    fn elbo(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, num_samples: usize, seed: u64) -> PyResult<(f64, f64)> {
        let e = bnnp_elbo(&self.state.model, &self.input(x)?, &self.output(y)?, num_samples, NoiseSource::new(seed)).map_err(to_py)?;
        Ok((e.value, e.stderr))
    }

    /// Meta-trains until `steps` total steps; `config_json` holds any
    /// training fields besides `steps`. Returns the per-step losses.
    #[pyo3(signature = (tasks, steps, config_json=None))]
    fn train(&mut self, py: Python<'_>, tasks: &PyTaskSet, steps: usize, config_json: Option<&str>) -> PyResult<Vec<f64>> {
        let mut value: serde_json::Value = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => serde_json::json!({}),
        };
        value["steps"] = serde_json::json!(steps);
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let state = &mut self.state;
        let reports = py.detach(|| train(state, &tasks.tasks, &cfg, |_, _| Ok(()))).map_err(to_py)?;
        self.train_config = Some(cfg);
        Ok(reports.iter().map(|r| r.loss()).collect())
    }

    /// `{metric: (mean, stderr, per_task)}` for metrics among
    /// `lppd`, `mae`, `elbo`.
    #[pyo3(signature = (tasks, metrics, num_samples=64, seed=0))]
    #[allow(clippy::type_complexity)]
    fn evaluate(&self, py: Python<'_>, tasks: &PyTaskSet, metrics: Vec<String>, num_samples: usize, seed: u64) -> PyResult<Vec<(String, f64, f64, Vec<f64>)>> {
        let metrics = metrics.iter().map(|m| parse::<Metric>(m)).collect::<PyResult<Vec<_>>>()?;
        let model = &self.state.model;
        let out = py.detach(|| evaluate_tasks(model, &tasks.tasks, &metrics, num_samples, seed)).map_err(to_py)?;
        Ok(out.into_iter().map(|s| (s.metric, s.mean, s.stderr, s.per_task)).collect())
    }
}

impl PyBnnp {
    fn input(&self, rows: Vec<Vec<f64>>) -> PyResult<Mat> {
        shaped(rows, self.state.model.config.input_dim())
    }

    fn output(&self, rows: Vec<Vec<f64>>) -> PyResult<Mat> {
        shaped(rows, self.state.model.config.output_dim())
    }
}

fn shaped(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Mat> {
    if rows.is_empty() {
        return Ok(Mat::zeros(0, cols));
    }
    let m = to_mat(rows)?;
    if m.ncols() != cols {
        return Err(PyValueError::new_err(format!("expected {cols} columns, got {}", m.ncols())));
    }
    Ok(m)
}

fn standard_setup(widths: Vec<usize>, activation: &str, sigma_y: f64) -> PyResult<(NetworkConfig, PriorSet)> {
    let config = NetworkConfig {
        activation: parse(activation)?,
        structure: Structure::Diagonal,
        log_sigma_y: vec![sigma_y.ln()],
        ..NetworkConfig::new(widths)
    };
    config.validate().map_err(to_py)?;
    let prior = PriorSet::standard_init(&config.widths, config.bias, Structure::Diagonal).map_err(to_py)?;
    Ok((config, prior))
}

/// Monte Carlo log marginal likelihood under the standard diagonal prior:
/// `(value, stderr)`.
#[pyfunction]
#[pyo3(signature = (widths, x, y, sigma_y, num_samples=100_000, seed=0, activation="relu"))]
#[allow(clippy::too_many_arguments)]
fn log_marginal_likelihood(py: Python<'_>, widths: Vec<usize>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, sigma_y: f64, num_samples: usize, seed: u64, activation: &str) -> PyResult<(f64, f64)> {
    let (config, prior) = standard_setup(widths, activation, sigma_y)?;
    let (x, y) = (shaped(x, config.input_dim())?, shaped(y, config.output_dim())?);
    let e = py.detach(|| lml_mc(&prior, &config, &x, &y, &[sigma_y], num_samples, seed)).map_err(to_py)?;
    Ok((e.value, e.stderr))
}

/// Fits a variational baseline (`mfvi`, `ucvi`, `lcvi`, `fcvi`) under the
/// standard diagonal prior and returns `(elbo, stderr, trace)`.
#[pyfunction]
#[pyo3(signature = (family, widths, x, y, sigma_y, steps=20_000, num_samples=8, seed=0, elbo_samples=10_000, activation="relu"))]
#[allow(clippy::too_many_arguments)]
fn fit_baseline(
    py: Python<'_>,
    family: &str,
    widths: Vec<usize>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    sigma_y: f64,
    steps: usize,
    num_samples: usize,
    seed: u64,
    elbo_samples: usize,
    activation: &str,
) -> PyResult<(f64, f64, Vec<f64>)> {
    let family: Family = parse(family)?;
    let (config, prior) = standard_setup(widths, activation, sigma_y)?;
    let (x, y) = (shaped(x, config.input_dim())?, shaped(y, config.output_dim())?);
    let cfg = FitConfig { steps, num_samples, seed, ..FitConfig::for_family(family) };
    py.detach(|| {
        let r = fit(family, &x, &y, &prior, &config, sigma_y, &cfg)?;
        let e = elbo_of(&r.posterior, &x, &y, &prior, &config, sigma_y, elbo_samples, derive_seed(seed, &[1]))?;
        Ok((e.value, e.stderr, r.trace))
    })
    .map_err(to_py)
}

/// Linear learning-rate schedule value at `step` of `total`.
#[pyfunction]
fn learning_rate(step: usize, start: f64, end: f64, total: usize) -> f64 {
    bnnp::trainer::lr_at(step, &LrSchedule { start, end }, total)
}

#[pymodule]
fn bnnp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskSet>()?;
    m.add_class::<PyBnnp>()?;
    m.add_function(wrap_pyfunction!(log_marginal_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(fit_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    Ok(())
}
