//! Python module `dualteacher_py`.

use std::collections::HashMap;
use std::path::PathBuf;

use dualteacher::config::{Mode, TrainConfig};
use dualteacher::consistency::{schedule_value, RampSchedule};
use dualteacher::distill::importance_weight as weight;
use dualteacher::metrics::{self, evaluate_fold};
use dualteacher::phantom::{generate_phantom, load_dataset, make_folds, save_dataset, Dataset, Domain, DomainSample, PhantomSpec};
use dualteacher::trainer::{TrainData, Trainer};
use dualteacher::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::CorruptHeader { .. } | Error::UnknownVersion { .. } | Error::PayloadSize { .. } => {
            PyIOError::new_err(e.to_string())
        }
        Error::NonFinite(_) | Error::Divergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_domain(name: &str) -> PyResult<Domain> {
    Domain::ALL
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown domain {name:?}")))
}

/// A generated or loaded phantom dataset.
#[pyclass(name = "Dataset", module = "dualteacher_py")]
struct PyDataset {
    inner: Dataset,
}

impl PyDataset {
    fn sample(&self, id: &str) -> PyResult<&DomainSample> {
        self.inner.get(id).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset from a PhantomSpec JSON string (default benchmark
    /// when omitted).
    #[staticmethod]
    #[pyo3(signature = (spec_json=None))]
    fn generate(spec_json: Option<&str>) -> PyResult<Self> {
        let spec = match spec_json {
            Some(s) => serde_json::from_str::<PhantomSpec>(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PhantomSpec::default(),
        };
        Ok(Self {
            inner: generate_phantom(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    fn ids(&self, domain: &str) -> PyResult<Vec<String>> {
        let d = parse_domain(domain)?;
        Ok(self.inner.by_domain(d).iter().map(|s| s.id.clone()).collect())
    }

    /// Row-major image in `[-1, 1]`.
    fn image(&self, id: &str) -> PyResult<Vec<f32>> {
        Ok(self.sample(id)?.image.clone())
    }

    fn label(&self, id: &str) -> PyResult<Option<Vec<u8>>> {
        Ok(self.sample(id)?.label.clone())
    }

    /// Sample ids of each split of fold `k`.
    fn fold(&self, k: usize) -> PyResult<HashMap<String, Vec<String>>> {
        let m = make_folds(&self.inner, k).map_err(py_err)?;
        Ok(HashMap::from([
            ("source".to_string(), m.source),
            ("labeled_target".to_string(), m.labeled_target),
            ("unlabeled_target".to_string(), m.unlabeled_target),
            ("test".to_string(), m.test),
        ]))
    }
}

/// Training driver for one fold.
#[pyclass(name = "Trainer", module = "dualteacher_py", unsendable)]
struct PyTrainer {
    inner: Trainer,
    test: Vec<DomainSample>,
    fold: usize,
}

#[pymethods]
impl PyTrainer {
    /// `config_json` is a TrainConfig JSON object; `overrides` are
    /// `key=value` strings applied on top.
    #[new]
    #[pyo3(signature = (dataset, fold=0, config_json=None, overrides=Vec::new(), run_dir=None))]
    fn new(
        dataset: PyRef<'_, PyDataset>,
        fold: usize,
        config_json: Option<&str>,
        overrides: Vec<String>,
        run_dir: Option<PathBuf>,
    ) -> PyResult<Self> {
        let base = match config_json {
            Some(s) => serde_json::from_str::<TrainConfig>(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let config = base.with_overrides(&overrides).map_err(py_err)?;
        let split = make_folds(&dataset.inner, fold).map_err(py_err)?;
        let data = TrainData::from_split(&dataset.inner, &split).map_err(py_err)?;
        let test = dataset.inner.lookup(&split.test).map_err(py_err)?.into_iter().cloned().collect();
        Ok(Self {
            inner: Trainer::new(config, data, run_dir.as_deref()).map_err(py_err)?,
            test,
            fold,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.state.epoch
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.state.iteration
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.state.config.mode.to_string()
    }

    /// Runs one epoch and returns its log rows as dicts.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = self.inner.run_epoch().map_err(py_err)?;
        rows.iter()
            .map(|r| {
                let d = PyDict::new(py);
                let value = serde_json::to_value(r).map_err(|e| PyValueError::new_err(e.to_string()))?;
                for (k, v) in value.as_object().expect("log rows serialize as objects") {
                    match v {
                        serde_json::Value::Number(n) => d.set_item(k, n.as_f64())?,
                        serde_json::Value::String(s) => d.set_item(k, s)?,
                        _ => d.set_item(k, py.None())?,
                    }
                }
                Ok(d)
            })
            .collect()
    }

    /// Trains until the configured epoch count.
    fn train(&mut self) -> PyResult<()> {
        self.inner.train().map_err(py_err)
    }

    /// Scores the student on the fold's test split.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let refs: Vec<&DomainSample> = self.test.iter().collect();
        let r = evaluate_fold(&self.inner.state.student, &refs, self.fold).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("fold", r.fold)?;
        d.set_item("mean_dice", r.mean_dice)?;
        d.set_item("mean_asd", r.mean_asd)?;
        d.set_item("class_names", r.class_names)?;
        d.set_item("class_dice", r.class_dice)?;
        d.set_item("class_asd", r.class_asd)?;
        Ok(d)
    }
}

/// Dice in percent for one class; returns `(value, both_empty)`.
#[pyfunction]
fn dice(pred: Vec<u8>, gt: Vec<u8>, class_id: u8) -> PyResult<(f64, bool)> {
    let d = metrics::dice(&pred, &gt, class_id).map_err(py_err)?;
    Ok((d.value, d.both_empty))
}

/// Average surface distance in pixels, `None` when a surface is empty.
#[pyfunction]
fn asd(pred: Vec<u8>, gt: Vec<u8>, width: usize, class_id: u8) -> PyResult<Option<f64>> {
    metrics::asd(&pred, &gt, width, class_id).map_err(py_err)
}

/// Returns `(t, p, degenerate)`.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(Option<f64>, Option<f64>, bool)> {
    let t = metrics::paired_t_test(&a, &b).map_err(py_err)?;
    Ok((t.t, t.p, t.degenerate))
}

/// Returns `(bias, lower, upper)`.
#[pyfunction]
fn bland_altman(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = metrics::bland_altman(&a, &b).map_err(py_err)?;
    Ok((r.bias, r.lower, r.upper))
}

#[pyfunction]
#[pyo3(signature = (d_score, w_max=10.0))]
fn importance_weight(d_score: f64, w_max: f64) -> PyResult<f64> {
    Ok(weight(d_score, w_max).map_err(py_err)?.weight)
}

#[pyfunction]
fn lambda_con(t: f64, t_max: f64) -> PyResult<f64> {
    schedule_value(&RampSchedule::lambda_con(t_max), t).map_err(py_err)
}

#[pyfunction]
fn u_thre(t: f64, t_max: f64, num_classes: usize) -> PyResult<f64> {
    schedule_value(&RampSchedule::u_thre(t_max, num_classes), t).map_err(py_err)
}

#[pyfunction]
fn modes() -> Vec<&'static str> {
    Mode::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn dualteacher_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(asd, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(bland_altman, m)?)?;
    m.add_function(wrap_pyfunction!(importance_weight, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_con, m)?)?;
    m.add_function(wrap_pyfunction!(u_thre, m)?)?;
    m.add_function(wrap_pyfunction!(modes, m)?)?;
    Ok(())
}
