//! Python bindings: configuration, experiment state (train, evaluate,
//! predict, checkpoint), metrics and the self-test suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use clom::autodiff::Tape;
use clom::config::{DataSource, ExperimentConfig};
use clom::experiment::{self, ExperimentState};
use clom::inference::{predict_cil, predict_til, task_outputs};
use clom::metrics::{self, AccuracyMatrix};
use clom::tensor::Tensor;
use clom::{checkpoint, selftest, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Experiment configuration (see the TOML schema in the README).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml_str(t).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Configuration for small synthetic Gaussian tasks.
    #[staticmethod]
    fn synthetic(n_tasks: usize, epochs: usize) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        inner.data.source = DataSource::Synthetic;
        inner.data.n_tasks = n_tasks;
        inner.model.hidden_width = 64;
        inner.train.epochs = epochs;
        inner.train.warmup_epochs = epochs.saturating_sub(1).min(2);
        inner.train.finetune_epochs = epochs;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    #[getter]
    fn s_max(&self) -> f32 {
        self.inner.masknet.s_max
    }

    #[setter]
    fn set_s_max(&mut self, s: f32) -> PyResult<()> {
        let mut c = self.inner.clone();
        c.masknet.s_max = s;
        c.validate().map_err(py_err)?;
        self.inner = c;
        Ok(())
    }
}

/// A continual-learning experiment: model, memory, calibration and the
/// accuracy matrices, trained one task at a time.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    state: ExperimentState,
    tasks: Vec<clom::data::TaskDataset>,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let tasks = experiment::load_tasks(&config.inner).map_err(py_err)?;
        let kind = tasks.first().ok_or_else(|| PyValueError::new_err("empty task sequence"))?.kind;
        let state = ExperimentState::new(config.inner.clone(), kind).map_err(py_err)?;
        Ok(Self { state, tasks })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = checkpoint::load(&path).map_err(py_err)?;
        let tasks = experiment::load_tasks(&state.config).map_err(py_err)?;
        Ok(Self { state, tasks })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.state, &path).map_err(py_err)
    }

    #[getter]
    fn tasks_learned(&self) -> usize {
        self.state.next_task
    }

    #[getter]
    fn tasks_total(&self) -> usize {
        self.tasks.len()
    }

    /// Trains the next task; returns its final (TIL, CIL, calibrated CIL).
    fn train_next_task(&mut self, py: Python<'_>) -> PyResult<(f64, f64, f64)> {
        let (state, tasks) = (&mut self.state, &self.tasks);
        let rep = py.detach(|| experiment::train_next_task(state, tasks)).map_err(py_err)?;
        let ev = rep.evaluation;
        Ok((ev.til_overall, ev.cil_overall, ev.cil_calibrated_overall.unwrap_or(ev.cil_overall)))
    }

    /// Task-incremental accuracy matrix rows.
    fn til_matrix(&self) -> Vec<Vec<f64>> {
        self.state.til.rows().to_vec()
    }

    fn cil_matrix(&self, calibrated: bool) -> Vec<Vec<f64>> {
        let m = if calibrated { &self.state.cil_calibrated } else { &self.state.cil };
        m.rows().to_vec()
    }

    /// Local class predictions of task `task` (0-based) for row-major inputs.
    fn predict_til(&self, x: Vec<Vec<f32>>, task: usize) -> PyResult<Vec<usize>> {
        let (flat, rows) = self.flatten(x)?;
        let cfg = &self.state.config;
        let out = task_outputs(&self.state.model, &flat, rows, cfg.masknet.s_max, cfg.eval.batch_size).map_err(py_err)?;
        predict_til(&out, task).map_err(py_err)
    }

    /// Global class predictions over every learned task.
    #[pyo3(signature = (x, calibrated = true))]
    fn predict_cil(&self, x: Vec<Vec<f32>>, calibrated: bool) -> PyResult<Vec<usize>> {
        let (flat, rows) = self.flatten(x)?;
        let cfg = &self.state.config;
        let out = task_outputs(&self.state.model, &flat, rows, cfg.masknet.s_max, cfg.eval.batch_size).map_err(py_err)?;
        let cal = if calibrated { self.state.calibration.as_ref() } else { None };
        predict_cil(&out, cal).map_err(py_err)
    }

    /// Test inputs and global labels of the first `n` tasks.
    fn test_set(&self, n: usize) -> (Vec<Vec<f32>>, Vec<usize>) {
        let n = n.min(self.tasks.len());
        let (xs, labels, _) = experiment::pooled_test(&self.tasks, n);
        let dim = self.state.model.arch.kind.dim();
        (xs.chunks(dim).map(<[f32]>::to_vec).collect(), labels)
    }
}

impl PyExperiment {
    fn flatten(&self, x: Vec<Vec<f32>>) -> PyResult<(Vec<f32>, usize)> {
        let dim = self.state.model.arch.kind.dim();
        if let Some(bad) = x.iter().find(|r| r.len() != dim) {
            return Err(PyValueError::new_err(format!("expected rows of length {dim}, got {}", bad.len())));
        }
        let rows = x.len();
        Ok((x.concat(), rows))
    }
}

/// `P(in > out) + 0.5 P(in = out)`.
#[pyfunction]
fn auc(in_scores: Vec<f32>, out_scores: Vec<f32>) -> PyResult<f64> {
    metrics::auc(&in_scores, &out_scores).map_err(py_err)
}

/// Forgetting rate over the first `t` tasks of a lower-triangular matrix.
#[pyfunction]
fn forgetting_rate(rows: Vec<Vec<f64>>, t: usize) -> PyResult<f64> {
    let a = AccuracyMatrix::from_rows(rows).map_err(py_err)?;
    metrics::forgetting_rate(&a, t).map_err(py_err)
}

#[pyfunction]
fn avg_incremental_accuracy(per_step: Vec<f64>) -> PyResult<f64> {
    metrics::avg_incremental_accuracy(&per_step).map_err(py_err)
}

/// Supervised contrastive loss of unit-norm rows `z` with temperature `tau`.
#[pyfunction]
fn supcon_loss(z: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64) -> PyResult<f64> {
    let d = z.first().map_or(0, Vec::len);
    let rows = z.len();
    let t = Tensor::matrix(rows, d, z.concat()).map_err(py_err)?;
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(t);
    let l = tape.supcon(v, &labels, tau).map_err(py_err)?;
    Ok(tape.scalar_value(l))
}

/// Runs the verification suites; returns `(suite, check, worst, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_selftest(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let checks = py.detach(|| selftest::run_all(seed, false)).map_err(py_err)?;
    Ok(checks.into_iter().map(|c| (c.suite.to_string(), c.name, c.worst, c.passed)).collect())
}

#[pymodule]
fn clom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting_rate, m)?)?;
    m.add_function(wrap_pyfunction!(avg_incremental_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
