//! Python bindings: configs, datasets, models, adaptation and the metric and
//! loss ops. Masks and maps cross the boundary as flat row-major lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use dattt::data::{load_dataset, LoadOptions, VideoSequence};
use dattt::harness::{self, ExperimentConfig};
use dattt::losses::{self, Consistency, SilogConfig};
use dattt::model::{self, ModelState};
use dattt::ttt::{self, InitSource, Objective, Strategy};

fn err(e: dattt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Experiment configuration: TOML file or run manifest plus `key=value` overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(path.as_deref(), &overrides).map_err(err)? })
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let table = toml::Table::try_from(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = ExperimentConfig::from_table(table, &overrides).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, strategy={})", self.inner.seed, self.inner.ttt.strategy.name())
    }
}

#[pyclass(name = "Video", from_py_object)]
#[derive(Clone)]
struct PyVideo {
    inner: VideoSequence,
}

impl PyVideo {
    fn sample(&self, i: usize) -> PyResult<&dattt::data::VideoSample> {
        self.inner.samples.get(i).ok_or_else(|| PyIndexError::new_err(format!("frame {i} out of range")))
    }
}

#[pymethods]
impl PyVideo {
    #[getter]
    fn video_id(&self) -> String {
        self.inner.video_id.clone()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Channel-first RGB frame in `[0, 1]`, `3*H*W` values.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        Ok(self.sample(i)?.image.data().to_vec())
    }

    fn depth(&self, i: usize) -> PyResult<Vec<f64>> {
        Ok(self.sample(i)?.depth.clone())
    }

    fn mask(&self, i: usize) -> PyResult<Option<Vec<bool>>> {
        Ok(self.sample(i)?.mask.clone())
    }
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Fresh initialization from the model section of `config`.
    #[staticmethod]
    #[pyo3(signature = (config, seed=None))]
    fn init(config: &PyConfig, seed: Option<u64>) -> PyResult<Self> {
        let inner = model::init_model(&config.inner.model, seed.unwrap_or(config.inner.seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: model::load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    fn param(&self, name: &str) -> PyResult<Vec<f64>> {
        let p = self.inner.param(name).ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))?;
        Ok(p.data.clone())
    }

    /// `(mask_logits, depth)` for one frame in evaluation mode.
    #[pyo3(signature = (video, frame, use_modulation=true))]
    fn forward(&self, video: &PyVideo, frame: usize, use_modulation: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let s = video.sample(frame)?;
        let out = model::forward(&self.inner, &s.image, &s.flow, use_modulation).map_err(err)?;
        Ok((out.mask_logits, out.depth))
    }
}

#[pyfunction]
fn generate_data(py: Python<'_>, config: &PyConfig, root: PathBuf) -> PyResult<()> {
    let cfg = config.inner.clone();
    py.detach(|| harness::generate_splits(&cfg, &root)).map_err(err)
}

#[pyfunction(name = "load_dataset")]
fn load_videos(root: PathBuf) -> PyResult<Vec<PyVideo>> {
    let videos = load_dataset(&root, &LoadOptions::default()).map_err(err)?;
    Ok(videos.into_iter().map(|inner| PyVideo { inner }).collect())
}

/// Stage-1 training; returns the model and the per-step joint loss.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, videos: Vec<PyVideo>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner.clone();
    let data: Vec<VideoSequence> = videos.into_iter().map(|v| v.inner).collect();
    let (inner, history) = py.detach(|| harness::train_model(&cfg, &data)).map_err(err)?;
    Ok((PyModel { inner }, history.steps.iter().map(|s| s.joint).collect()))
}

#[pyfunction]
fn infer(py: Python<'_>, model: &PyModel, video: &PyVideo) -> PyResult<Vec<Vec<bool>>> {
    py.detach(|| ttt::infer_video(&model.inner, &video.inner)).map_err(err)
}

/// Adapts `model` to `video` with the config's TTT section and returns the
/// final-epoch masks plus the per-step losses (`None` for skipped steps).
#[pyfunction]
#[pyo3(signature = (model, video, config, strategy=None, objective=None, epochs=None))]
fn adapt(
    py: Python<'_>,
    model: &PyModel,
    video: &PyVideo,
    config: &PyConfig,
    strategy: Option<&str>,
    objective: Option<&str>,
    epochs: Option<usize>,
) -> PyResult<(Vec<Vec<bool>>, Vec<Option<f64>>)> {
    let mut cfg = config.inner.ttt_config();
    if let Some(s) = strategy {
        cfg.strategy = Strategy::parse(s).map_err(err)?;
    }
    if let Some(o) = objective {
        cfg.objective = Objective::parse(o).map_err(err)?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(err)?;
    let (mut per_epoch, trace) = py.detach(|| ttt::predict_per_epoch(&model.inner, &video.inner, &cfg)).map_err(err)?;
    let last = per_epoch.pop().unwrap_or_default();
    Ok((last, trace.rows.iter().map(|r| r.loss).collect()))
}

/// `(frame, "pretrained" | "carry")` for every step.
#[pyfunction]
#[pyo3(signature = (frames, strategy, epochs, clips=None, seed=0))]
fn build_schedule(frames: usize, strategy: &str, epochs: usize, clips: Option<usize>, seed: u64) -> PyResult<Vec<(usize, &'static str)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let s = ttt::build_schedule(frames, Strategy::parse(strategy).map_err(err)?, epochs, clips, &mut rng).map_err(err)?;
    Ok(s.steps
        .iter()
        .map(|x| (x.frame, if x.init == InitSource::Pretrained { "pretrained" } else { "carry" }))
        .collect())
}

#[pyfunction]
fn jaccard(gt: Vec<bool>, pred: Vec<bool>) -> PyResult<f64> {
    dattt::eval::jaccard(&gt, &pred).map_err(err)
}

#[pyfunction]
fn f_measure(gt: Vec<bool>, pred: Vec<bool>) -> PyResult<f64> {
    dattt::eval::f_measure(&gt, &pred).map_err(err)
}

fn silog_config(alpha: f64, lambda_v: f64, eps_log: f64) -> SilogConfig {
    SilogConfig { alpha, lambda_v, eps_log, ..SilogConfig::default() }
}

#[pyfunction]
#[pyo3(signature = (pred, reference, valid=None, alpha=10.0, lambda_v=0.85, eps_log=1e-6))]
fn silog_loss(pred: Vec<f64>, reference: Vec<f64>, valid: Option<Vec<bool>>, alpha: f64, lambda_v: f64, eps_log: f64) -> PyResult<f64> {
    losses::silog_loss(&pred, &reference, valid.as_deref(), &silog_config(alpha, lambda_v, eps_log)).map_err(err)
}

/// Consistency loss of two canonical-grid depth maps; `None` when fewer than
/// two pixels are jointly valid.
#[pyfunction]
#[pyo3(signature = (depth1, depth2, valid, alpha=10.0, lambda_v=0.85, eps_log=1e-6))]
fn consistency_loss(
    depth1: Vec<f64>,
    depth2: Vec<f64>,
    valid: Vec<bool>,
    alpha: f64,
    lambda_v: f64,
    eps_log: f64,
) -> PyResult<Option<f64>> {
    match losses::consistency_loss(&depth1, &depth2, &valid, &silog_config(alpha, lambda_v, eps_log)).map_err(err)? {
        Consistency::Loss(v) => Ok(Some(v)),
        Consistency::Skip => Ok(None),
    }
}

/// Full pipeline into `out`; returns the manifest as JSON.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    let manifest = py.detach(|| harness::run_pipeline(&cfg, &out)).map_err(err)?;
    serde_json::to_string_pretty(&manifest).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "dattt")]
pub fn dattt_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVideo>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(load_videos, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(f_measure, m)?)?;
    m.add_function(wrap_pyfunction!(silog_loss, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
