//! Python bindings. Structured configs and reports cross the boundary as
//! JSON strings; tensors as flat row-major lists plus dims.

use std::path::{Path, PathBuf};

use bootseg::assembly::{run_instance_pipeline, InstanceHypothesis, PipelineConfig};
use bootseg::eval::{instance_report, map_r as map_r_impl, GtInstance, ImageInstances, PredInstance};
use bootseg::fcrn::{compute_fov as compute_fov_impl, load_checkpoint, REPORTED_FOV};
use bootseg::losses::{bootstrapped_cross_entropy as bce_impl, select_hard_semantic, BootstrapConfig};
use bootseg::synth::{generate_dataset as generate_dataset_impl, generate_sample as generate_sample_impl, load_dataset, SceneConfig};
use bootseg::trainer::{train_to_dir, TrainConfig};
use bootseg::workflow::{run_end_to_end, write_report, SemanticSource};
use bootseg::{tensor, Error, LabelMap};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.code());
    if e.is_validation() {
        PyValueError::new_err(msg)
    } else {
        PyRuntimeError::new_err(msg)
    }
}

fn parse<T: for<'de> serde::Deserialize<'de>>(what: &str, json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn pipeline(json: Option<&str>) -> PyResult<PipelineConfig> {
    json.map_or(Ok(PipelineConfig::default()), |j| parse("pipeline", j))
}

#[pyclass(name = "BBox", skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(tensor::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> PyResult<Self> {
        tensor::BBox::new(y_min, x_min, y_max, x_max).map(Self).map_err(to_py)
    }

    #[getter]
    fn y_min(&self) -> f64 {
        self.0.y_min
    }
    #[getter]
    fn x_min(&self) -> f64 {
        self.0.x_min
    }
    #[getter]
    fn y_max(&self) -> f64 {
        self.0.y_max
    }
    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: PyRef<'_, PyBBox>) -> f64 {
        tensor::box_iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.to_array();
        format!("BBox({a}, {b}, {c}, {d})")
    }
}

/// Dense f32 tensor.
#[pyclass(name = "Tensor")]
struct PyTensor(tensor::Tensor<f32>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        tensor::Tensor::new(dims, data).map(Self).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Sample")]
struct PySample(bootseg::synth::Sample);

#[pymethods]
impl PySample {
    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }
    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }
    #[getter]
    fn image(&self) -> PyTensor {
        PyTensor(self.0.image.clone())
    }
    #[getter]
    fn semantic(&self) -> Vec<u32> {
        self.0.semantic.data.clone()
    }
    #[getter]
    fn instances(&self) -> Vec<u32> {
        self.0.instances.data.clone()
    }
    /// `(id, category, BBox)` per instance.
    #[getter]
    fn records(&self) -> Vec<(u32, u32, PyBBox)> {
        self.0.records.iter().map(|r| (r.id, r.category, PyBBox(r.bbox))).collect()
    }
}

#[pyclass(name = "Hypothesis")]
struct PyHypothesis(InstanceHypothesis);

#[pymethods]
impl PyHypothesis {
    #[getter]
    fn category(&self) -> u32 {
        self.0.category
    }
    #[getter]
    fn confidence(&self) -> f64 {
        self.0.confidence
    }
    #[getter]
    fn bbox(&self) -> PyBBox {
        PyBBox(self.0.bbox)
    }
    /// Flat pixel indices of the mask, ascending.
    #[getter]
    fn pixels(&self) -> Vec<usize> {
        self.0.cluster.clone()
    }
}

#[pyfunction]
fn compute_fov(output_stride: usize, kernel: usize, dilation: usize) -> usize {
    compute_fov_impl(output_stride, kernel, dilation)
}

/// Reported rows `(table, depth, output_stride, kernel, dilation, fov)`.
#[pyfunction]
fn fov_table() -> Vec<(String, usize, usize, usize, usize, usize)> {
    REPORTED_FOV
        .iter()
        .map(|r| (r.table.to_string(), r.depth, r.output_stride, r.kernel, r.dilation, r.fov))
        .collect()
}

#[pyfunction]
fn mask_iou(a: Vec<usize>, b: Vec<usize>) -> f64 {
    tensor::mask_iou(&a, &b)
}

#[pyfunction]
fn generate_sample(config_json: &str, index: u64) -> PyResult<PySample> {
    let cfg: SceneConfig = parse("scene config", config_json)?;
    generate_sample_impl(&cfg, index).map(PySample).map_err(to_py)
}

/// Writes `count` samples plus a manifest under `out_dir`.
#[pyfunction]
fn generate_dataset(config_json: &str, count: usize, out_dir: PathBuf) -> PyResult<usize> {
    let cfg: SceneConfig = parse("scene config", config_json)?;
    generate_dataset_impl(&cfg, count, out_dir)
        .map(|m| m.samples.len())
        .map_err(to_py)
}

/// Bootstrapped cross-entropy of one `[K+1,H,W]` probability map against
/// flat labels. Returns `(loss, kept pixels, effective threshold)`.
#[pyfunction]
#[pyo3(signature = (probs, labels, t0=0.6, min_kept=0, enabled=true))]
fn bootstrapped_cross_entropy(
    probs: PyRef<'_, PyTensor>,
    labels: Vec<u32>,
    t0: f64,
    min_kept: usize,
    enabled: bool,
) -> PyResult<(f64, usize, f64)> {
    let (_, h, w) = probs.0.chw().map_err(to_py)?;
    let labels = LabelMap::new(h, w, labels).map_err(to_py)?;
    let cfg = BootstrapConfig {
        enabled,
        t0,
        min_kept,
        ..BootstrapConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    let batch = [(&probs.0, &labels)];
    let sel = select_hard_semantic(&batch, &cfg).map_err(to_py)?;
    let (loss, _) = bce_impl(&batch, &sel).map_err(to_py)?;
    Ok((loss, sel.len(), sel.threshold))
}

/// Instance assembly of one image from `[K+1,H,W]` scores and `[4K,h,w]`
/// box codes at `stride`.
#[pyfunction]
#[pyo3(signature = (probs, transform, stride, pipeline_json=None))]
fn assemble(
    probs: PyRef<'_, PyTensor>,
    transform: PyRef<'_, PyTensor>,
    stride: usize,
    pipeline_json: Option<&str>,
) -> PyResult<Vec<PyHypothesis>> {
    let cfg = pipeline(pipeline_json)?;
    run_instance_pipeline(&probs.0, &transform.0, stride, &cfg)
        .map(|hs| hs.into_iter().map(PyHypothesis).collect())
        .map_err(to_py)
}

type PyImage = (Vec<(u32, f64, Vec<usize>)>, Vec<(u32, Vec<usize>)>);

fn to_images(raw: Vec<PyImage>) -> Vec<ImageInstances> {
    raw.into_iter()
        .map(|(preds, gts)| ImageInstances {
            preds: preds
                .into_iter()
                .map(|(category, confidence, pixels)| PredInstance {
                    category,
                    confidence,
                    pixels,
                })
                .collect(),
            gts: gts
                .into_iter()
                .map(|(category, pixels)| GtInstance { category, pixels })
                .collect(),
        })
        .collect()
}

/// Mean region AP at one mask-IoU threshold. Each image is
/// `([(category, confidence, pixels)], [(category, pixels)])`.
#[pyfunction]
fn map_r(images: Vec<PyImage>, num_categories: u32, iou_threshold: f64) -> PyResult<f64> {
    map_r_impl(&to_images(images), num_categories, iou_threshold).map_err(to_py)
}

/// Full instance report as JSON; same image format as `map_r`.
#[pyfunction]
fn instance_report_json(images: Vec<PyImage>, num_categories: u32) -> PyResult<String> {
    let r = instance_report(&to_images(images), num_categories).map_err(to_py)?;
    Ok(serde_json::to_string(&r).expect("report serializes"))
}

/// Trains from a TOML/JSON config; returns the per-step losses.
#[pyfunction]
fn train(py: Python<'_>, config_path: PathBuf, out_dir: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = TrainConfig::load(&config_path).map_err(to_py)?;
    let out = py.detach(|| train_to_dir(&cfg, &out_dir)).map_err(to_py)?;
    Ok(out.log.iter().map(|r| r.loss).collect())
}

/// Inference, assembly and evaluation over a manifest; returns the report
/// as JSON. Without `semantic` the ground truth supplies the score maps.
#[pyfunction]
#[pyo3(signature = (localization, manifest, semantic=None, oracle=false, pipeline_json=None, out_dir=None))]
fn end_to_end(
    py: Python<'_>,
    localization: PathBuf,
    manifest: PathBuf,
    semantic: Option<PathBuf>,
    oracle: bool,
    pipeline_json: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = pipeline(pipeline_json)?;
    py.detach(|| -> bootseg::Result<String> {
        let loc = load_checkpoint(&localization)?;
        let sem = semantic.as_deref().map(load_checkpoint).transpose()?;
        let (_, samples) = load_dataset(&manifest)?;
        let source = match (&sem, oracle) {
            (Some(s), false) => SemanticSource::Network(s),
            (s, true) => SemanticSource::Oracle(s.as_ref()),
            (None, false) => return Err(Error::Config("a semantic checkpoint or oracle=True is required".into())),
        };
        let report = run_end_to_end(source, &loc, &samples, &cfg, out_dir.as_deref())?;
        if let Some(dir) = out_dir.as_deref().map(Path::new) {
            write_report(dir, &report, &report.table())?;
        }
        Ok(serde_json::to_string(&report).expect("report serializes"))
    })
    .map_err(to_py)
}

#[pymodule]
fn bootseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyHypothesis>()?;
    m.add_function(wrap_pyfunction!(compute_fov, m)?)?;
    m.add_function(wrap_pyfunction!(fov_table, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrapped_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(map_r, m)?)?;
    m.add_function(wrap_pyfunction!(instance_report_json, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(end_to_end, m)?)?;
    Ok(())
}
