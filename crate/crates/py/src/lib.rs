//! Python bindings. Boxes cross the boundary as `(x1, y1, x2, y2)` tuples,
//! detections and samples as dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sdetr_core::config::RunConfig;
use sdetr_core::data::{generate_dataset, load_dataset, Sample};
use sdetr_core::eval::{evaluate, GroundTruth, MetricReport};
use sdetr_core::geometry::{box_giou, box_iou, BoxXYXY};
use sdetr_core::losses::hungarian as solve_assignment;
use sdetr_core::model::Detr;
use sdetr_core::objective::{detect, prepare_image, Detection};
use sdetr_core::train::{self, prepare_images, Checkpoint, FinetuneInit, RunOptions, StepRecord};
use sdetr_core::views::build_view_pair;

create_exception!(sdetr, SdetrError, PyException);

type Box4 = (f32, f32, f32, f32);

fn err(e: impl std::fmt::Display) -> PyErr {
    SdetrError::new_err(e.to_string())
}

fn to_box(b: Box4) -> PyResult<BoxXYXY> {
    BoxXYXY::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn from_box(b: &BoxXYXY) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f32> {
    Ok(box_iou(&to_box(a)?, &to_box(b)?))
}

#[pyfunction]
fn giou(a: Box4, b: Box4) -> PyResult<f32> {
    Ok(box_giou(&to_box(a)?, &to_box(b)?))
}

/// Minimum-cost assignment of rows (targets) to columns (predictions);
/// returns the column of each row.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(solve_assignment(&cost).map_err(err)?.pred)
}

/// Flat `key = value` run configuration.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = None, overrides = Vec::new()))]
    fn new(text: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(t) = text {
            inner.apply_text(t).map_err(err)?;
        }
        inner.apply_overrides(&overrides).map_err(err)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(<{} keys>)", self.inner.entries().len())
    }
}

fn sample_dict<'py>(py: Python<'py>, s: &Sample) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("path", &s.path)?;
    d.set_item("width", s.image.width())?;
    d.set_item("height", s.image.height())?;
    d.set_item("boxes", s.boxes.iter().map(from_box).collect::<Vec<_>>())?;
    d.set_item("labels", s.labels.clone())?;
    Ok(d)
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("image", d.image)?;
    out.set_item("box", from_box(&d.bbox))?;
    out.set_item("class", d.class)?;
    out.set_item("score", d.score)?;
    Ok(out)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ap", r.ap)?;
    d.set_item("ap50", r.ap50)?;
    d.set_item("ap75", r.ap75)?;
    d.set_item("ar1", r.ar1)?;
    d.set_item("ar10", r.ar10)?;
    Ok(d)
}

fn record_dict<'py>(py: Python<'py>, r: &StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("lr", r.lr)?;
    d.set_item("total", r.losses.total)?;
    if r.pretrain {
        d.set_item("loc", r.losses.loc)?;
        d.set_item("global_disc", r.losses.global_disc)?;
        d.set_item("region_disc", r.losses.region_disc)?;
    }
    Ok(d)
}

/// Renders `count` scenes under `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (count, out, config = None))]
fn generate(count: usize, out: PathBuf, config: Option<PyRef<'_, PyRunConfig>>) -> PyResult<String> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let path = generate_dataset(count, &cfg.data, &out).map_err(err)?;
    Ok(path.display().to_string())
}

#[pyfunction]
fn load_samples<'py>(py: Python<'py>, manifest: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let samples = load_dataset(&manifest).map_err(err)?;
    samples.iter().map(|s| sample_dict(py, s)).collect()
}

/// Builds the two views of one image; returns their rectangles in image
/// coordinates and the aligned proposal lists in view coordinates.
#[pyfunction]
fn view_pair<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    index: usize,
    seed: u64,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let samples = load_dataset(&manifest).map_err(err)?;
    let s = samples.get(index).ok_or_else(|| err(format!("index {index} out of range")))?;
    let vp = build_view_pair(&s.image, &cfg.view, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rect1", from_box(&vp.rect1))?;
    d.set_item("rect2", from_box(&vp.rect2))?;
    d.set_item("proposals1", vp.proposals1.iter().map(from_box).collect::<Vec<_>>())?;
    d.set_item("proposals2", vp.proposals2.iter().map(from_box).collect::<Vec<_>>())?;
    d.set_item("iou", box_iou(&vp.rect1, &vp.rect2))?;
    Ok(d)
}

/// A detector loaded from (or trained into) a parameter set.
#[pyclass(name = "Detector")]
struct PyDetector {
    model: Detr,
    cfg: RunConfig,
}

#[pymethods]
impl PyDetector {
    /// Loads a finetuned checkpoint, validated against `config`.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<PyRef<'_, PyRunConfig>>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let model = Checkpoint::load(&path).map_err(err)?.detector(&cfg).map_err(err)?;
        Ok(Self { model, cfg })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta: BTreeMap<String, String> = [
            ("kind".to_string(), "finetune".to_string()),
            ("config".to_string(), self.cfg.render()),
        ]
        .into();
        Checkpoint {
            params: self.model.params.clone(),
            optim: None,
            meta,
        }
        .save(&path)
        .map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.model.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// One detection per query for every image of a dataset.
    fn detect<'py>(&self, py: Python<'py>, manifest: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let samples = load_dataset(&manifest).map_err(err)?;
        let backbone = sdetr_core::backbone::FrozenBackbone::new(self.cfg.backbone_seed);
        let mut out = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let img = prepare_image(&backbone, s, self.cfg.detect_size, false).map_err(err)?;
            for d in detect(&self.model, &img, i).map_err(err)? {
                out.push(detection_dict(py, &d)?);
            }
        }
        Ok(out)
    }

    /// AP, AP50, AP75, AR@1 and AR@10 over a labeled dataset.
    fn evaluate<'py>(&self, py: Python<'py>, manifest: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let samples = load_dataset(&manifest).map_err(err)?;
        let images: Vec<_> = prepare_images(&self.cfg, &samples, threads())
            .map_err(err)?
            .into_iter()
            .map(|[a, _]| a)
            .collect();
        let gt: Vec<GroundTruth> = samples.iter().map(GroundTruth::from).collect();
        report_dict(py, &evaluate(&self.model, &images, &gt).map_err(err)?)
    }
}

/// Self-supervised pretraining; returns the per-step loss records.
#[pyfunction]
#[pyo3(signature = (manifest, out, config = None))]
fn pretrain<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out: PathBuf,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let samples = load_dataset(&manifest).map_err(err)?;
    std::fs::create_dir_all(&out).map_err(err)?;
    let opts = RunOptions {
        out_dir: Some(out),
        resume: None,
        threads: threads(),
    };
    let outcome = train::pretrain(&cfg, &samples, &opts, |_| {}).map_err(err)?;
    outcome.records.iter().map(|r| record_dict(py, r)).collect()
}

/// Detection finetuning from `init` (a pretraining checkpoint) or from
/// scratch; returns the trained detector.
#[pyfunction]
#[pyo3(signature = (manifest, init = None, config = None))]
fn finetune(
    manifest: PathBuf,
    init: Option<PathBuf>,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<PyDetector> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let start = match init {
        Some(p) => FinetuneInit::Pretrained(Box::new(Checkpoint::load(&p).map_err(err)?)),
        None => FinetuneInit::Scratch,
    };
    let samples = load_dataset(&manifest).map_err(err)?;
    let opts = RunOptions {
        out_dir: None,
        resume: None,
        threads: threads(),
    };
    let outcome = train::finetune(&cfg, &samples, &start, &opts, |_| {}).map_err(err)?;
    Ok(PyDetector {
        model: outcome.model,
        cfg,
    })
}

#[pymodule]
fn sdetr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SdetrError", m.py().get_type::<SdetrError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_samples, m)?)?;
    m.add_function(wrap_pyfunction!(view_pair, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    Ok(())
}
