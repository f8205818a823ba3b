//! Python bindings. Matrices cross the boundary as lists of rows (numpy
//! arrays convert through the sequence protocol).

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use idian::data::{make_synthetic as synth, Domain, DomainDataset, Instance, SyntheticSpec};
use idian::error::IdianError;
use idian::experiment::{self, ExperimentConfig};
use idian::losses::{self, PairMode};
use idian::metrics;
use idian::model::{load_checkpoint, save_checkpoint, ArchSpec, CheckpointMeta, IdianModel};
use idian::rng::NoiseSource;
use idian::trainer::{build_variant, Variant};

fn to_py(e: IdianError) -> PyErr {
    match e {
        IdianError::Io { .. } => PyIOError::new_err(e.to_string()),
        IdianError::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment configuration (TOML).
#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
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
            Some(text) => ExperimentConfig::from_toml(text).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn missing_rate(&self) -> f64 {
        self.inner.data.missing_rate
    }

    #[setter]
    fn set_missing_rate(&mut self, rate: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.data.missing_rate = rate;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.train.master_seed
    }

    #[setter]
    fn set_master_seed(&mut self, seed: u64) {
        self.inner.train.master_seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> String {
        self.inner.run.out_dir.display().to_string()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: &str) {
        self.inner.run.out_dir = dir.into();
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(name={:?}, hash={})", self.inner.name, &self.inner.hash()[..12])
    }
}

/// One domain: features, observation mask and optional labels.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    /// Labeled instances must come first in target data.
    #[new]
    #[pyo3(signature = (features, labels, n_classes, domain = "target", mask = None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<Option<usize>>,
        n_classes: usize,
        domain: &str,
        mask: Option<Vec<Vec<bool>>>,
    ) -> PyResult<Self> {
        let domain = match domain {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(PyValueError::new_err(format!("unknown domain {other:?}"))),
        };
        if labels.len() != features.len() {
            return Err(PyValueError::new_err("features and labels differ in length"));
        }
        let dim = features.first().map_or(0, Vec::len);
        let masks = mask.unwrap_or_else(|| features.iter().map(|f| vec![true; f.len()]).collect());
        if masks.len() != features.len() {
            return Err(PyValueError::new_err("features and mask differ in length"));
        }
        let instances = features
            .into_iter()
            .zip(masks)
            .zip(&labels)
            .map(|((f, m), y)| Instance::with_mask(f, m, *y))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let labeled = labels.iter().take_while(|y| y.is_some()).count();
        let inner = DomainDataset::new(domain, instances, dim, n_classes, labeled).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.instances.iter().map(|i| i.features.clone()).collect()
    }

    fn mask(&self) -> Vec<Vec<bool>> {
        self.inner.instances.iter().map(|i| i.mask.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<usize>> {
        self.inner.instances.iter().map(|i| i.label).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn labeled_count(&self) -> usize {
        self.inner.labeled_count
    }

    fn observed_fraction(&self) -> f64 {
        self.inner.observed_fraction()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// The eight component networks.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: IdianModel,
}

#[pymethods]
impl PyModel {
    /// `arch` is `"desk"` (widths divided by 16) or `"reference"`.
    #[new]
    #[pyo3(signature = (source_dim, target_dim, n_classes, arch = "desk", seed = 0))]
    fn new(source_dim: usize, target_dim: usize, n_classes: usize, arch: &str, seed: u64) -> PyResult<Self> {
        let arch = match arch {
            "desk" => ArchSpec::desk(),
            "reference" => ArchSpec::reference(),
            other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
        };
        let inner = IdianModel::new(source_dim, target_dim, n_classes, arch, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(path).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, master_seed = 0, config_hash = String::new()))]
    fn save(&self, path: &str, master_seed: u64, config_hash: String) -> PyResult<()> {
        let meta = CheckpointMeta {
            master_seed,
            config_hash,
        };
        save_checkpoint(&self.inner, &meta, path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Target class probabilities; `mask` entries are 1 (observed) or 0.
    #[pyo3(signature = (x, mask, seed = 0))]
    fn predict(&self, x: Vec<Vec<f64>>, mask: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (x, m) = (matrix(x)?, matrix(mask)?);
        let eps = NoiseSource::indexed(seed).sample(x.nrows(), x.ncols(), 0);
        Ok(rows(&self.inner.predict_with_noise(&x, &m, &eps).map_err(to_py)?))
    }

    #[pyo3(signature = (x, mask, seed = 0))]
    fn impute(&self, x: Vec<Vec<f64>>, mask: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (x, m) = (matrix(x)?, matrix(mask)?);
        let mut noise = NoiseSource::indexed(seed);
        Ok(rows(&self.inner.impute(&x, &m, &mut noise, 0).map_err(to_py)?))
    }

    fn predict_source(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict_source(&matrix(x)?).map_err(to_py)?))
    }
}

#[pyfunction]
#[pyo3(signature = (n_per_class = 500, n_classes = 4, source_dim = 32, target_dim = 32, separation = 1.5, noise = 1.0, seed = 0))]
fn make_synthetic(
    n_per_class: usize,
    n_classes: usize,
    source_dim: usize,
    target_dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = SyntheticSpec {
        n_per_class,
        n_classes,
        source_dim,
        target_dim,
        separation,
        noise,
        seed,
        ..SyntheticSpec::default()
    };
    let (s, t) = synth(&spec).map_err(to_py)?;
    Ok((PyDataset { inner: s }, PyDataset { inner: t }))
}

/// Returns `(source, target_train, test)` for repeat `repeat`.
#[pyfunction]
#[pyo3(signature = (config, repeat = 0))]
fn prepare_data(config: &PyConfig, repeat: usize) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
    let cfg = &config.inner;
    let d = experiment::prepare_data(cfg, cfg.repeat_seed(repeat)).map_err(to_py)?;
    Ok((
        PyDataset { inner: d.source },
        PyDataset { inner: d.target_train },
        PyDataset { inner: d.test },
    ))
}

/// Trains `model` in place with the config's training section; returns the
/// per-epoch mean losses.
#[pyfunction]
#[pyo3(signature = (model, source, target, config, variant = "full"))]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    source: &PyDataset,
    target: &PyDataset,
    config: &PyConfig,
    variant: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let variant: Variant = variant.parse().map_err(to_py)?;
    let cfg = build_variant(&config.inner.train, variant);
    let history = idian::trainer::train(&mut model.inner, &source.inner, &target.inner, &cfg).map_err(to_py)?;
    json_to_py(py, &history.epochs)
}

#[pyfunction]
#[pyo3(signature = (model, test, seed = 0))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, test: &PyDataset, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::evaluate(&model.inner, &test.inner, seed).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Runs the configured grid, writes the result files and returns the summary
/// rows.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let out = experiment::run_experiment(&config.inner).map_err(to_py)?;
    json_to_py(py, &out.summary)
}

#[pyfunction]
fn loss_adv(d_source: Vec<Vec<f64>>, d_target: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::loss_adv(&matrix(d_source)?, &matrix(d_target)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (probs_target, labels_target, probs_source, labels_source, alpha = 1.0))]
fn loss_cls(
    probs_target: Vec<Vec<f64>>,
    labels_target: Vec<usize>,
    probs_source: Vec<Vec<f64>>,
    labels_source: Vec<usize>,
    alpha: f64,
) -> PyResult<f64> {
    losses::loss_cls(
        &matrix(probs_target)?,
        &labels_target,
        &matrix(probs_source)?,
        &labels_source,
        alpha,
    )
    .map_err(to_py)
}

/// Returns `(loss, degenerate)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, from_source, margin = 1.0, cross_only = false))]
fn loss_contrastive(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    from_source: Vec<bool>,
    margin: f64,
    cross_only: bool,
) -> PyResult<(f64, bool)> {
    let mode = if cross_only { PairMode::CrossOnly } else { PairMode::Union };
    losses::loss_contrastive(&matrix(embeddings)?, &labels, &from_source, margin, mode).map_err(to_py)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(to_py)
}

/// `(name, max relative error)` for every loss and routed gradient check.
#[pyfunction]
#[pyo3(signature = (seed = 0, epsilon = 1e-6))]
fn gradcheck(seed: u64, epsilon: f64) -> PyResult<Vec<(String, f64)>> {
    Ok(idian::gradcheck::oracle_suite(seed, epsilon)
        .map_err(to_py)?
        .into_iter()
        .map(|(name, r)| (name, r.max_relative_error))
        .collect())
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

#[pymodule]
fn idian_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(loss_adv, m)?)?;
    m.add_function(wrap_pyfunction!(loss_cls, m)?)?;
    m.add_function(wrap_pyfunction!(loss_contrastive, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
