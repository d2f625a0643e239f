//! Python bindings for the sinusnet pipeline.
//!
//! Exposes the volume type with its deterministic transforms, the phantom
//! generator, the classification metrics with their cross-fold aggregation,
//! the warmup-cosine schedule query, config validation, and the end-to-end
//! pipeline runner. Heavy lifting stays in the `sinusnet` crate; this layer
//! only converts between numpy arrays and `ndarray` and maps errors onto
//! Python exceptions.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sinusnet::augment::{augment_seeded, AugmentationPolicy};
use sinusnet::config::{load_config, validate_config, ExperimentConfig};
use sinusnet::metrics::{self, MetricSummary, MetricsReport};
use sinusnet::nn::WarmupCosine;
use sinusnet::phantom::{self, AnomalyKind, PhantomConfig, Sample, SampleLabel, Side};
use sinusnet::pipeline::{run_pipeline, Stage};
use sinusnet::volume::{self, Volume};
use sinusnet::{io, Error};

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Config(_) | Error::Argument(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A dense 3D scalar grid with voxel spacing metadata.
#[pyclass(name = "Volume")]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    /// Wrap a float32 array of shape (D, H, W); non-finite voxels are rejected.
    #[new]
    #[pyo3(signature = (data, spacing = (1.0, 1.0, 1.0), id = "volume"))]
    fn new(data: PyReadonlyArray3<'_, f32>, spacing: (f32, f32, f32), id: &str) -> PyResult<Self> {
        Volume::new(data.as_array().to_owned(), [spacing.0, spacing.1, spacing.2], id)
            .map(|inner| PyVolume { inner })
            .map_err(to_py)
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.data.clone().into_pyarray(py)
    }

    #[getter]
    fn spacing(&self) -> (f32, f32, f32) {
        let [a, b, c] = self.inner.spacing;
        (a, b, c)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    /// Min-max rescale into [0, 1].
    fn normalize(&self) -> PyVolume {
        PyVolume { inner: volume::normalize(&self.inner) }
    }

    /// Mirror along the W axis (left/right canonicalization).
    fn flip_lr(&self) -> PyVolume {
        PyVolume { inner: volume::flip_lr(&self.inner) }
    }

    /// Clamp every voxel into [0, 1].
    fn clamp01(&self) -> PyVolume {
        PyVolume { inner: volume::clamp01(&self.inner) }
    }

    /// Extract a subvolume of `size` centred on `centroid`.
    fn crop(&self, centroid: (usize, usize, usize), size: (usize, usize, usize)) -> PyResult<PyVolume> {
        volume::crop_subvolume(&self.inner, centroid, size)
            .map(|inner| PyVolume { inner })
            .map_err(to_py)
    }

    /// Odd-kernel 3D median filter with edge replication.
    fn median_filter(&self, kernel: usize) -> PyResult<PyVolume> {
        volume::median_filter3d(&self.inner, kernel)
            .map(|inner| PyVolume { inner })
            .map_err(to_py)
    }

    /// Write in the raw .svol format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_volume(&path, &self.inner).map_err(to_py)
    }

    /// Read a .svol or NIfTI (.nii / .nii.gz) file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyVolume> {
        io::load_volume(&path).map(|inner| PyVolume { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let (d, h, w) = self.inner.shape();
        format!("Volume(id='{}', shape=({d}, {h}, {w}))", self.inner.id)
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Left => "left",
        Side::Right => "right",
    }
}

fn kind_name(kind: AnomalyKind) -> &'static str {
    match kind {
        AnomalyKind::Blob => "blob",
        AnomalyKind::WallThickening => "wall_thickening",
        AnomalyKind::Polyp => "polyp",
    }
}

/// One labelled phantom subvolume with its provenance and ground truth.
#[pyclass(name = "Sample")]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn patient(&self) -> &str {
        &self.inner.patient
    }

    #[getter]
    fn side(&self) -> &'static str {
        side_name(self.inner.side)
    }

    #[getter]
    fn label(&self) -> &'static str {
        match self.inner.label {
            SampleLabel::Normal => "normal",
            SampleLabel::Anomalous => "anomalous",
        }
    }

    #[getter]
    fn anomaly_kind(&self) -> Option<&'static str> {
        self.inner.anomaly_kind.map(kind_name)
    }

    #[getter]
    fn volume(&self) -> PyVolume {
        PyVolume { inner: self.inner.volume.clone() }
    }

    /// Exact lesion voxels as a uint8 array; None for normal samples.
    #[getter]
    fn gt_mask<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyArray3<u8>>> {
        self.inner.gt_mask.as_ref().map(|m| m.clone().into_pyarray(py))
    }

    fn is_anomalous(&self) -> bool {
        self.inner.is_anomalous()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id='{}', label='{}')", self.inner.id, self.label())
    }
}

/// Generate a deterministic synthetic dataset of sinus phantoms.
#[pyfunction]
#[pyo3(signature = (n_samples, anomaly_fraction = 0.4, volume_size = 64, texture_noise_std = 0.05, seed = 0))]
fn generate_dataset(
    n_samples: usize,
    anomaly_fraction: f64,
    volume_size: usize,
    texture_noise_std: f64,
    seed: u64,
) -> PyResult<Vec<PySample>> {
    let cfg = PhantomConfig { n_samples, anomaly_fraction, volume_size, texture_noise_std, seed };
    let samples = phantom::generate_dataset(&cfg).map_err(to_py)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

/// Apply the stochastic augmentation pipeline (affine, flip, noise) once.
#[pyfunction]
#[pyo3(signature = (v, seed, p_affine = 0.5, p_flip = 0.5, p_noise = 0.5, noise_std = 0.1))]
fn augment(
    v: &PyVolume,
    seed: u64,
    p_affine: f64,
    p_flip: f64,
    p_noise: f64,
    noise_std: f64,
) -> PyResult<PyVolume> {
    let policy = AugmentationPolicy {
        p_affine,
        p_flip,
        p_noise,
        noise_std,
        rng_seed: seed,
        ..AugmentationPolicy::default()
    };
    policy.validate().map_err(to_py)?;
    Ok(PyVolume { inner: augment_seeded(&v.inner, &policy) })
}

/// Area under the ROC curve; needs at least one positive and one negative.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(to_py)
}

/// Area under the precision-recall curve.
#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auprc(&scores, &labels).map_err(to_py)
}

/// F1 of hard predictions against labels.
#[pyfunction]
fn f1_score(predictions: Vec<bool>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::f1_score(&predictions, &labels).map_err(to_py)
}

fn summary_dict<'py>(py: Python<'py>, s: &MetricSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("per_fold", s.per_fold.clone())?;
    d.set_item("mean", s.mean)?;
    d.set_item("ci95_low", s.ci95_low)?;
    d.set_item("ci95_high", s.ci95_high)?;
    d.set_item("n_folds", s.n_folds)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("auroc", summary_dict(py, &r.auroc)?)?;
    d.set_item("auprc", summary_dict(py, &r.auprc)?)?;
    d.set_item("f1", summary_dict(py, &r.f1)?)?;
    Ok(d)
}

/// Mean and 95% t-interval of per-fold metric values (needs >= 2 folds).
#[pyfunction]
fn aggregate_folds<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::aggregate_folds(&values).map_err(to_py)?;
    summary_dict(py, &s)
}

/// Learning rate of the linear-warmup cosine-decay schedule at one epoch.
#[pyfunction]
fn lr_at(base_lr: f64, warmup_epochs: usize, total_epochs: usize, epoch: usize) -> PyResult<f64> {
    WarmupCosine::new(base_lr, warmup_epochs, total_epochs)
        .and_then(|s| s.lr_at(epoch))
        .map_err(to_py)
}

/// Validate experiment-config TOML text; returns one "field: rule" line per
/// violation, empty when runnable. Unparseable text raises ValueError.
#[pyfunction]
fn validate_config_text(text: &str) -> PyResult<Vec<String>> {
    let cfg = ExperimentConfig::from_toml(text).map_err(to_py)?;
    Ok(validate_config(&cfg).iter().map(|d| d.to_string()).collect())
}

/// Run the experiment pipeline from a config file, resuming completed stages.
///
/// Returns a dict with the run directory, executed/skipped stage lists, and
/// the metrics report once the evaluate stage has completed.
#[pyfunction]
#[pyo3(signature = (config_path, seed = None, upto = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    seed: Option<u64>,
    upto: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(&config_path).map_err(to_py)?.resolve(seed);
    let upto = upto.map(Stage::parse).transpose().map_err(to_py)?;
    let summary = run_pipeline(&cfg, upto).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("run_dir", summary.run_dir)?;
    d.set_item("executed", summary.executed)?;
    d.set_item("skipped", summary.skipped)?;
    match &summary.report {
        Some(r) => d.set_item("report", report_dict(py, r)?)?,
        None => d.set_item("report", py.None())?,
    }
    Ok(d)
}

#[pymodule]
fn sinusnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PySample>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_folds, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config_text, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
