//! Python module `csai_transfer`: configs, grids, checkpoints, fold
//! pretraining, cross-validation and the metric helpers.

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use csai_transfer::classifiers::{HeadKind, HeadSpec};
use csai_transfer::config::RunConfig;
use csai_transfer::dataset::{bin_hourly, prepare_fold, synth_generate, RawGrid, SynthConfig, TimeSeriesBatch};
use csai_transfer::evaluation::{fold_splits, pretrain_fold as core_pretrain_fold, run_cv as core_run_cv, CheckpointSource};
use csai_transfer::imputer::{impute, Checkpoint as CoreCheckpoint};
use csai_transfer::numerics::Array;
use csai_transfer::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config { .. } | Error::Invalid(_) | Error::Parse { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Cube = Vec<Vec<Vec<f32>>>;

fn cube_to_array(c: &Cube, name: &str) -> PyResult<Array> {
    let n = c.len();
    let t = c.first().map_or(0, Vec::len);
    let d = c.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * t * d);
    for rec in c {
        if rec.len() != t {
            return Err(PyValueError::new_err(format!("{name}: ragged time axis")));
        }
        for step in rec {
            if step.len() != d {
                return Err(PyValueError::new_err(format!("{name}: ragged feature axis")));
            }
            data.extend_from_slice(step);
        }
    }
    Array::new(vec![n, t, d], data).map_err(|e| PyValueError::new_err(format!("{name}: {e}")))
}

fn array_to_cube(a: &Array) -> Cube {
    let s = a.shape();
    let (t, d) = (s[1], s[2]);
    a.data()
        .chunks(t * d)
        .map(|rec| rec.chunks(d).map(<[f32]>::to_vec).collect())
        .collect()
}

fn rows(a: &Array) -> Vec<Vec<f32>> {
    let c = a.cols();
    a.data().chunks(c).map(<[f32]>::to_vec).collect()
}

/// Run configuration parsed from JSON; unknown keys are rejected.
#[pyclass(name = "Config", module = "csai_transfer", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => RunConfig::from_json(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn folds(&self) -> usize {
        self.inner.folds
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, folds={}, plans={})",
            self.inner.seed,
            self.inner.folds,
            self.inner.plans.len()
        )
    }
}

/// Hourly `[N, T, D]` grid of raw values with observation mask and labels.
#[pyclass(name = "Grid", module = "csai_transfer", skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: RawGrid,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    #[pyo3(signature = (n_records, n_features, missing_rate=0.4, seed=0, steps=48))]
    fn synthetic(n_records: usize, n_features: usize, missing_rate: f64, seed: u64, steps: usize) -> PyResult<Self> {
        let data = synth_generate(&SynthConfig {
            n_records,
            steps,
            n_features,
            missing_rate,
            seed,
        })
        .map_err(to_py)?;
        let inner = bin_hourly(&data.events, &data.labels, None, steps).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RawGrid::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.inner.n_records()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn features(&self) -> Vec<String> {
        self.inner.features.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }

    fn values(&self) -> Cube {
        array_to_cube(&self.inner.values)
    }

    fn mask(&self) -> Cube {
        array_to_cube(&self.inner.mask)
    }

    fn observed_fraction(&self) -> f64 {
        self.inner.mask.data().iter().map(|&m| m as f64).sum::<f64>() / self.inner.mask.len() as f64
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(records={}, steps={}, features={})",
            self.inner.n_records(),
            self.inner.steps,
            self.inner.n_features()
        )
    }
}

/// Pretrained imputer parameters with the normalization they were fit with.
#[pyclass(name = "Checkpoint", module = "csai_transfer", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

impl PyCheckpoint {
    fn batch(&self, values: &Cube, mask: &Cube) -> PyResult<TimeSeriesBatch> {
        let values = cube_to_array(values, "values")?;
        let mask = cube_to_array(mask, "mask")?;
        let n = values.shape()[0];
        TimeSeriesBatch::new((0..n).map(|i| i.to_string()).collect(), values, mask, Array::zeros(&[n])).map_err(to_py)
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let b = self.inner.to_bytes().map_err(to_py)?;
        Ok(pyo3::types::PyBytes::new(py, &b))
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn val_metric(&self) -> Option<f64> {
        self.inner.val_metric
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.total_size()
    }

    #[getter]
    fn features(&self) -> Vec<String> {
        self.inner.features.clone()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Imputes already-normalized `[N, T, D]` values; observed cells come
    /// back unchanged.
    fn impute(&self, py: Python<'_>, values: Cube, mask: Cube) -> PyResult<Cube> {
        let batch = self.batch(&values, &mask)?;
        let out = py
            .detach(|| impute(&self.inner.params, &self.inner.config, &batch, 256))
            .map_err(to_py)?;
        Ok(array_to_cube(&out.imputed))
    }

    /// Final forward and backward hidden states, `[N, 2H]`.
    fn hidden_states(&self, py: Python<'_>, values: Cube, mask: Cube) -> PyResult<Vec<Vec<f32>>> {
        let batch = self.batch(&values, &mask)?;
        let out = py
            .detach(|| impute(&self.inner.params, &self.inner.config, &batch, 256))
            .map_err(to_py)?;
        let f = rows(&out.hidden_last_fwd);
        let b = rows(&out.hidden_last_bwd);
        Ok(f.into_iter().zip(b).map(|(mut x, y)| {
            x.extend(y);
            x
        })
        .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(epoch={}, params={}, val_metric={:?})",
            self.inner.epoch,
            self.inner.params.total_size(),
            self.inner.val_metric
        )
    }
}

/// Pretrains the imputer on fold `fold` of `grid`.
#[pyfunction]
fn pretrain_fold(py: Python<'_>, grid: &PyGrid, config: &PyConfig, fold: usize) -> PyResult<PyCheckpoint> {
    let (g, cfg) = (&grid.inner, &config.inner);
    let ck = py
        .detach(|| {
            let splits = fold_splits(cfg, g)?;
            let split = splits
                .get(fold)
                .ok_or_else(|| Error::invalid(format!("fold {fold} of {}", splits.len())))?;
            let prepared = prepare_fold(g, split)?;
            core_pretrain_fold(cfg, g, &prepared).map(|(ck, _)| ck)
        })
        .map_err(to_py)?;
    Ok(PyCheckpoint { inner: ck })
}

/// Full cross-validation; returns the report as a JSON string.
#[pyfunction]
fn run_cv(py: Python<'_>, grid: &PyGrid, config: &PyConfig) -> PyResult<String> {
    let out = py
        .detach(|| core_run_cv(&grid.inner, &config.inner, CheckpointSource::Pretrain))
        .map_err(to_py)?;
    serde_json::to_string(&out.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    csai_transfer::evaluation::auroc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (iteration, base_lr=1e-5, max_lr=1e-3, step_size=2000, gamma=0.9999))]
fn cyclic_lr(iteration: usize, base_lr: f64, max_lr: f64, step_size: usize, gamma: f64) -> f64 {
    csai_transfer::training::cyclic_lr(iteration, base_lr, max_lr, step_size, gamma)
}

/// MAE, RMSE and MRE over cells where `eval_mask` is 1.
#[pyfunction]
fn imputation_metrics<'py>(
    py: Python<'py>,
    imputed: Vec<f32>,
    truth: Vec<f32>,
    eval_mask: Vec<f32>,
) -> PyResult<Bound<'py, PyDict>> {
    let arr = |v: Vec<f32>| Array::new(vec![v.len()], v).map_err(|e| PyValueError::new_err(e.to_string()));
    let m = csai_transfer::evaluation::imputation_metrics(&arr(imputed)?, &arr(truth)?, &arr(eval_mask)?)
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("mre", m.mre)?;
    d.set_item("cells", m.cells)?;
    Ok(d)
}

/// Trainable parameters of a head: `kind` is one of mlp2, mlp5, lstm1,
/// gru1, linear.
#[pyfunction]
#[pyo3(signature = (kind, input_dim, hidden_width=128, rnn_hidden=108))]
fn head_param_count(kind: &str, input_dim: usize, hidden_width: usize, rnn_hidden: usize) -> PyResult<usize> {
    let kind: HeadKind = serde_json::from_value(serde_json::Value::String(kind.to_lowercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown head kind `{kind}`")))?;
    let spec = HeadSpec {
        hidden_width,
        rnn_hidden,
        ..HeadSpec::new(kind, input_dim)
    };
    Ok(spec.head_param_count())
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("csai-transfer".to_string()).chain(args).collect();
    py.detach(|| csai_transfer::cli::run(argv))
}

#[pymodule]
#[pyo3(name = "csai_transfer")]
fn csai_transfer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(pretrain_fold, m)?)?;
    m.add_function(wrap_pyfunction!(run_cv, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(cyclic_lr, m)?)?;
    m.add_function(wrap_pyfunction!(imputation_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(head_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
