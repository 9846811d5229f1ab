//! Python module `realtalk`: pipeline commands, metrics and the
//! deformation operator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use realtalk::engine::Tensor;
use realtalk::face::{EmotionLabel, LANDMARK_DIM};
use realtalk::frame::RgbImage;
use realtalk::metrics::Region;
use realtalk::{acceptance, ldm, metrics, pipeline, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn image(data: Vec<f32>, width: u32, height: u32) -> PyResult<RgbImage> {
    RgbImage::from_data(width, height, data).map_err(py_err)
}

fn landmarks(rows: Vec<Vec<f32>>) -> PyResult<Tensor<f32>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != LANDMARK_DIM) {
        return Err(PyValueError::new_err(format!("frame {bad} has {} values, expected {LANDMARK_DIM}", rows[bad].len())));
    }
    let n = rows.len();
    Ok(Tensor::new(n, LANDMARK_DIM, rows.into_iter().flatten().collect()))
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn emotion(name: &str) -> PyResult<EmotionLabel> {
    name.parse().map_err(py_err)
}

/// Pipeline configuration: defaults, an optional JSON file, then
/// `key=value` overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: pipeline::PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = pipeline::PipelineConfig::load_with_env(path.as_deref(), &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(Self { inner: pipeline::PipelineConfig::load_str(json).map_err(py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn lambda_lpips(&self) -> f64 {
        self.inner.lambda_lpips
    }
}

#[pyclass(name = "InferResult", skip_from_py_object)]
struct PyInferResult {
    #[pyo3(get)]
    dir: PathBuf,
    #[pyo3(get)]
    frames: usize,
    #[pyo3(get)]
    neutral: Vec<Vec<f32>>,
    #[pyo3(get)]
    emotional: Vec<Vec<f32>>,
}

#[pyclass(name = "AblationRow", skip_from_py_object)]
struct PyAblationRow {
    #[pyo3(get)]
    delta: f64,
    #[pyo3(get)]
    ssim: f64,
    #[pyo3(get)]
    psnr: f64,
    #[pyo3(get)]
    perceptual: Option<f64>,
    #[pyo3(get)]
    m_lmd: f64,
    #[pyo3(get)]
    f_lmd: f64,
}

#[pyclass(name = "CriterionResult", skip_from_py_object)]
struct PyCriterion {
    #[pyo3(get)]
    id: u8,
    #[pyo3(get)]
    name: String,
    #[pyo3(get)]
    passed: bool,
    #[pyo3(get)]
    detail: String,
    #[pyo3(get)]
    seconds: f64,
}

#[pymethods]
impl PyCriterion {
    fn __repr__(&self) -> String {
        format!("CriterionResult(id={}, passed={}, detail={:?})", self.id, self.passed, self.detail)
    }
}

#[pyfunction]
fn emotions() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|e| e.name()).collect()
}

#[pyfunction]
fn synth_data(config: &PyConfig) -> PyResult<usize> {
    Ok(pipeline::synth_data(&config.inner).map_err(py_err)?.clips.len())
}

/// Runs one training stage (`vae`, `ldm` or `nerf`) and returns the
/// checkpoint directory.
#[pyfunction]
fn train(config: &PyConfig, stage: &str) -> PyResult<PathBuf> {
    let s = match stage {
        "vae" => pipeline::train_vae_stage(&config.inner),
        "ldm" => pipeline::train_ldm_stage(&config.inner),
        "nerf" => pipeline::train_nerf_stage(&config.inner),
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}; use vae, ldm or nerf"))),
    };
    Ok(s.map_err(py_err)?.checkpoint)
}

#[pyfunction]
#[pyo3(signature = (config, emotion_name=None, delta=None, out=None))]
fn infer(config: &PyConfig, emotion_name: Option<&str>, delta: Option<f64>, out: Option<PathBuf>) -> PyResult<PyInferResult> {
    let mut cfg = config.inner.clone();
    if let Some(e) = emotion_name {
        cfg.infer.emotion = emotion(e)?;
    }
    if let Some(d) = delta {
        cfg.delta = d;
    }
    if let Some(o) = out {
        cfg.paths.output = o;
    }
    cfg.validate().map_err(py_err)?;
    let r = pipeline::infer(&cfg).map_err(py_err)?;
    Ok(PyInferResult { frames: r.frames.len(), neutral: rows(&r.neutral), emotional: rows(&r.emotional), dir: r.dir })
}

#[pyfunction]
#[pyo3(signature = (config, deltas=None))]
fn ablate_delta(config: &PyConfig, deltas: Option<Vec<f64>>) -> PyResult<Vec<PyAblationRow>> {
    let deltas = deltas.unwrap_or_else(|| config.inner.ablation.deltas.clone());
    let report = pipeline::ablate_delta(&config.inner, &deltas).map_err(py_err)?;
    Ok(report
        .rows
        .into_iter()
        .map(|r| PyAblationRow { delta: r.delta, ssim: r.ssim, psnr: r.psnr, perceptual: r.perceptual, m_lmd: r.m_lmd, f_lmd: r.f_lmd })
        .collect())
}

#[pyfunction]
fn run_acceptance(selector: &str) -> PyResult<Vec<PyCriterion>> {
    Ok(acceptance::run_acceptance(selector)
        .map_err(py_err)?
        .into_iter()
        .map(|r| PyCriterion { id: r.id, name: r.name.to_string(), passed: r.passed, detail: r.detail, seconds: r.seconds })
        .collect())
}

/// Images are flat row-major RGB lists in `[0, 1]`.
#[pyfunction]
fn psnr(pred: Vec<f32>, gt: Vec<f32>, width: u32, height: u32) -> PyResult<f64> {
    metrics::psnr(&image(pred, width, height)?, &image(gt, width, height)?).map_err(py_err)
}

#[pyfunction]
fn ssim(pred: Vec<f32>, gt: Vec<f32>, width: u32, height: u32) -> PyResult<f64> {
    metrics::ssim(&image(pred, width, height)?, &image(gt, width, height)?).map_err(py_err)
}

/// Landmark distance over `mouth` or `face` points; frames are 204-value lists.
#[pyfunction]
#[pyo3(signature = (pred, gt, region="face"))]
fn lmd(pred: Vec<Vec<f32>>, gt: Vec<Vec<f32>>, region: &str) -> PyResult<f64> {
    let region = match region {
        "mouth" => Region::Mouth,
        "face" => Region::Face,
        other => return Err(PyValueError::new_err(format!("unknown region {other:?}; use mouth or face"))),
    };
    metrics::lmd(&landmarks(pred)?, &landmarks(gt)?, region).map_err(py_err)
}

/// `neutral + delta · displacement`, frame by frame.
#[pyfunction]
fn apply_deformation(neutral: Vec<Vec<f32>>, displacement: Vec<Vec<f32>>, delta: f64) -> PyResult<Vec<Vec<f32>>> {
    let out = ldm::apply_deformation(&landmarks(neutral)?, &landmarks(displacement)?, delta).map_err(py_err)?;
    Ok(rows(&out))
}

#[pymodule]
#[pyo3(name = "realtalk")]
pub fn realtalk_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyInferResult>()?;
    m.add_class::<PyAblationRow>()?;
    m.add_class::<PyCriterion>()?;
    m.add("DEFAULT_DELTA", ldm::DEFAULT_DELTA)?;
    m.add("DELTA_SWEEP", ldm::DELTA_SWEEP.to_vec())?;
    m.add("LANDMARK_DIM", LANDMARK_DIM)?;
    m.add_function(wrap_pyfunction!(emotions, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_delta, m)?)?;
    m.add_function(wrap_pyfunction!(run_acceptance, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lmd, m)?)?;
    m.add_function(wrap_pyfunction!(apply_deformation, m)?)?;
    Ok(())
}
