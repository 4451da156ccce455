//! Python bindings: scenario configs, datasets, models, training and evaluation.

use std::path::PathBuf;

use pasgnn::config::KvConfig;
use pasgnn::evaluation::{evaluate, EvalMode, EvalRow, Summary};
use pasgnn::model::{Model, ModelConfig, Variant};
use pasgnn::scenario::ScenarioConfig;
use pasgnn::training::{self, Dataset, Objective, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: pasgnn::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// System dimensions and physical parameters.
#[pyclass(name = "ScenarioConfig", from_py_object)]
#[derive(Clone)]
pub struct PyScenarioConfig {
    pub inner: ScenarioConfig,
}

#[pymethods]
impl PyScenarioConfig {
    #[new]
    #[pyo3(signature = (b=2, r=2, k=3, n=4, m=2, l=8, seed=0))]
    pub fn new(b: usize, r: usize, k: usize, n: usize, m: usize, l: usize, seed: u64) -> PyResult<Self> {
        let inner = ScenarioConfig {
            num_bs: b,
            num_ris: r,
            num_ue: k,
            num_wg: n,
            pas_per_wg: m,
            ris_elems: l,
            seed,
            ..ScenarioConfig::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Parses `key = value` text.
    #[staticmethod]
    pub fn from_text(text: &str) -> PyResult<Self> {
        let mut kv = KvConfig::parse(text).map_err(py_err)?;
        let inner = ScenarioConfig::from_kv(&mut kv).map_err(py_err)?;
        kv.finish().map_err(py_err)?;
        Ok(Self { inner })
    }

    pub fn to_text(&self) -> String {
        self.inner.to_kv_text()
    }

    #[getter]
    pub fn dims(&self) -> (usize, usize, usize, usize, usize, usize) {
        let c = &self.inner;
        (c.num_bs, c.num_ris, c.num_ue, c.num_wg, c.pas_per_wg, c.ris_elems)
    }

    fn __repr__(&self) -> String {
        let (b, r, k, n, m, l) = self.dims();
        format!("ScenarioConfig(B={b}, R={r}, K={k}, N={n}, M={m}, L={l}, seed={})", self.inner.seed)
    }
}

/// Seeded samples with a train/val/test split.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (config, samples, split=(8, 1, 1)))]
    pub fn generate(config: &PyScenarioConfig, samples: usize, split: (usize, usize, usize)) -> PyResult<Self> {
        let inner = training::generate_dataset(&config.inner, samples, [split.0, split.1, split.2]).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load_file(&path).map_err(py_err)? })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_file(&path).map_err(py_err)
    }

    #[getter]
    pub fn config(&self) -> PyScenarioConfig {
        PyScenarioConfig { inner: self.inner.config.clone() }
    }

    #[getter]
    pub fn train_indices(&self) -> Vec<usize> {
        self.inner.split.train.clone()
    }

    #[getter]
    pub fn val_indices(&self) -> Vec<usize> {
        self.inner.split.val.clone()
    }

    #[getter]
    pub fn test_indices(&self) -> Vec<usize> {
        self.inner.split.test.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

/// Per-sample evaluation result.
#[pyclass(name = "EvalRow", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyEvalRow {
    pub sample_id: usize,
    pub sum_rate: f64,
    pub energy_efficiency: f64,
    pub power_per_bs: Vec<f64>,
    pub feasible: bool,
    pub infer_ms: f64,
}

impl From<&EvalRow> for PyEvalRow {
    fn from(r: &EvalRow) -> Self {
        Self {
            sample_id: r.sample_id,
            sum_rate: r.sum_rate,
            energy_efficiency: r.energy_efficiency,
            power_per_bs: r.power_per_bs.clone(),
            feasible: r.feasible,
            infer_ms: r.infer_ms,
        }
    }
}

/// One training epoch.
#[pyclass(name = "EpochRecord", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sr: f64,
    pub val_ee: f64,
    pub lr: f64,
}

/// Three-stage complex GNN.
#[pyclass(name = "Model", skip_from_py_object)]
pub struct PyModel {
    pub inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, hidden=32, variant="full", residual=true, seed=0))]
    pub fn new(config: &PyScenarioConfig, hidden: usize, variant: &str, residual: bool, seed: u64) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let mc = ModelConfig {
            variant,
            residual,
            ..ModelConfig::for_scenario(&config.inner).with_hidden(hidden)
        };
        let inner = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Model::load_file(&path).map_err(py_err)? })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_file(&path).map_err(py_err)
    }

    #[getter]
    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    pub fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    /// Trains in place; returns the per-epoch history. The best-validation
    /// parameters are kept.
    #[pyo3(signature = (data, objective="sr", epochs=20, batch_size=32, lr=1e-2, milestones=vec![12, 17], patience=0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        data: &PyDataset,
        objective: &str,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        milestones: Vec<usize>,
        patience: usize,
        seed: u64,
    ) -> PyResult<Vec<PyEpochRecord>> {
        let objective: Objective = objective.parse().map_err(py_err)?;
        let cfg = TrainConfig {
            objective,
            epochs,
            batch_size,
            lr,
            milestones,
            patience,
            seed,
            ..TrainConfig::default()
        };
        let hist = training::train(&mut self.inner, &data.inner, &cfg, |_| {}).map_err(py_err)?;
        Ok(hist
            .records
            .iter()
            .map(|r| PyEpochRecord {
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_sr: r.val_sr,
                val_ee: r.val_ee,
                lr: r.lr,
            })
            .collect())
    }

    /// Evaluates `indices` (the test split by default) under `mode`.
    #[pyo3(signature = (data, indices=None, mode="proposed", seed=0))]
    pub fn evaluate(&self, data: &PyDataset, indices: Option<Vec<usize>>, mode: &str, seed: u64) -> PyResult<Vec<PyEvalRow>> {
        let mode: EvalMode = mode.parse().map_err(py_err)?;
        let idx = indices.unwrap_or_else(|| data.inner.split.test.clone());
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.inner.samples.len()) {
            return Err(PyValueError::new_err(format!("sample index {bad} out of range")));
        }
        let rows = evaluate(&self.inner, &data.inner, &idx, mode, seed).map_err(py_err)?;
        Ok(rows.iter().map(PyEvalRow::from).collect())
    }
}

/// `(mean SR, mean EE, mean infer ms, feasible fraction)` of evaluation rows.
#[pyfunction]
pub fn summarize(rows: Vec<PyRef<'_, PyEvalRow>>) -> (f64, f64, f64, f64) {
    let rows: Vec<EvalRow> = rows
        .iter()
        .map(|r| EvalRow {
            sample_id: r.sample_id,
            k: 0,
            b: 0,
            r: 0,
            sum_rate: r.sum_rate,
            energy_efficiency: r.energy_efficiency,
            power_per_bs: r.power_per_bs.clone(),
            feasible: r.feasible,
            infer_ms: r.infer_ms,
        })
        .collect();
    let s = Summary::of(&rows);
    (s.mean_sr, s.mean_ee, s.mean_ms, s.feasible_rate)
}

#[pymodule]
fn pasgnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenarioConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalRow>()?;
    m.add_class::<PyEpochRecord>()?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
