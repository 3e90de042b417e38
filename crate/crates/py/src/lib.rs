//! Python bindings. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ::diffmark as dm;
use dm::codec::{CodecConfig, WatermarkCodec};
use dm::dataset::SyntheticSpec;
use dm::detection::{self, ChiSquaredOptions, ContingencyTable2x2, DetectionHistogram, NullReference};
use dm::pipeline::{ExperimentConfig, PRESETS};
use dm::provenance::{self, CodecBinding, MarkOptions, MarkingPlan};
use dm::{ImageShape, ImageTensor};

fn to_py(e: dm::Error) -> PyErr {
    match e {
        dm::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        dm::Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        dm::Error::Config(_)
        | dm::Error::ShapeMismatch { .. }
        | dm::Error::PixelRange { .. }
        | dm::Error::Plan(_)
        | dm::Error::OverlappingSelectors { .. }
        | dm::Error::InsufficientCounts(_)
        | dm::Error::EmptyTable
        | dm::Error::Json(_)
        | dm::Error::Yaml(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Serde value to Python objects through `json.loads`.
fn to_object<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// YAML or JSON text (JSON is valid YAML) into a config type.
fn from_text<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_yaml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn image(shape: ImageShape, pixels: Vec<f32>) -> PyResult<ImageTensor> {
    ImageTensor::new(shape, pixels).map_err(to_py)
}

/// A labelled image collection; pixels are flat channel-major lists in [-1, 1].
#[pyclass(module = "diffmark")]
struct Dataset {
    inner: dm::dataset::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (num_classes=10, per_class=200, size=32, seed=0))]
    fn synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_classes,
            per_class,
            size,
            ..SyntheticSpec::default()
        };
        Ok(Self {
            inner: dm::dataset::synthetic(&spec, seed).map_err(to_py)?,
        })
    }

    /// Packed `.safetensors` file or a PNG directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dm::dataset::load_any(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_packed(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(channels, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape();
        (s.channels, s.height, s.width)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn labels(&self) -> PyResult<Vec<usize>> {
        self.inner.labels().map_err(to_py)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.records())
    }

    fn pixels(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .images()
            .get(index)
            .map(|i| i.pixels().to_vec())
            .ok_or_else(|| PyIndexError::new_err(format!("image {index} of {}", self.inner.len())))
    }
}

/// Frozen watermark generator and decoder pair.
#[pyclass(module = "diffmark")]
struct Codec {
    inner: WatermarkCodec,
}

#[pymethods]
impl Codec {
    /// Trains on `dataset`; `config` is YAML/JSON text of a codec configuration,
    /// the desk preset for the dataset's shape when absent.
    #[staticmethod]
    #[pyo3(signature = (dataset, num_watermarks=16, config=None, seed=0))]
    fn train(py: Python<'_>, dataset: &Dataset, num_watermarks: usize, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => from_text(text)?,
            None => CodecConfig {
                image_shape: dataset.inner.shape(),
                ..CodecConfig::desk(num_watermarks)
            },
        };
        let images = dataset.inner.images();
        let out = py
            .detach(|| dm::codec::train_codec(images, &cfg, seed, |_| {}))
            .map_err(to_py)?;
        Ok(Self { inner: out.codec })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: WatermarkCodec::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_watermarks(&self) -> usize {
        self.inner.num_watermarks()
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.inner.fingerprint().map_err(to_py)
    }

    fn watermark(&self, index: usize) -> PyResult<Vec<f32>> {
        Ok(self.inner.generate_watermark(index).map_err(to_py)?.image().pixels().to_vec())
    }

    /// Marks one flat image with watermark `index` at scale `lam`.
    fn mark(&self, pixels: Vec<f32>, index: usize, lam: f64) -> PyResult<Vec<f32>> {
        let x = image(self.inner.config().image_shape, pixels)?;
        Ok(self.inner.mark(&x, index, lam).map_err(to_py)?.pixels().to_vec())
    }

    /// Decoder logits for one flat image.
    fn decode(&self, pixels: Vec<f32>) -> PyResult<Vec<f64>> {
        let x = image(self.inner.config().image_shape, pixels)?;
        Ok(self.inner.decode(&x).map_err(to_py)?.values().to_vec())
    }
}

/// Resolves a marking plan (YAML/JSON text) and applies it; returns the marked
/// dataset and the manifest as a dict.
#[pyfunction]
#[pyo3(signature = (dataset, codec, plan, seed=0, quantize=true))]
fn mark_dataset<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    codec: &Codec,
    plan: &str,
    seed: u64,
    quantize: bool,
) -> PyResult<(Dataset, Bound<'py, PyAny>)> {
    let plan: MarkingPlan = from_text(plan)?;
    let binding = CodecBinding::of(&codec.inner).map_err(to_py)?;
    let manifest = provenance::resolve_plan(&plan, &dataset.inner, &binding, seed).map_err(to_py)?;
    let marked =
        provenance::apply_marking(&dataset.inner, &manifest, &codec.inner, MarkOptions { quantize }).map_err(to_py)?;
    Ok((Dataset { inner: marked }, to_object(py, &manifest)?))
}

fn null_reference(null: &str) -> PyResult<NullReference> {
    match null {
        "calibrated" => Ok(NullReference::Calibrated),
        "classic" => Ok(NullReference::Classic),
        other => Err(PyValueError::new_err(format!("null must be `calibrated` or `classic`, got `{other}`"))),
    }
}

/// Per-watermark chi-squared tests on a watermark × class count matrix.
#[pyfunction]
#[pyo3(signature = (counts, null="calibrated", min_expected=1.0))]
fn chi_squared<'py>(py: Python<'py>, counts: Vec<Vec<u64>>, null: &str, min_expected: f64) -> PyResult<Bound<'py, PyAny>> {
    let h = DetectionHistogram::from_counts(counts).map_err(to_py)?;
    let options = ChiSquaredOptions {
        null: null_reference(null)?,
        min_expected,
    };
    to_object(py, &detection::chi_squared_all(&h, &options).map_err(to_py)?)
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`.
#[pyfunction]
fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> PyResult<f64> {
    detection::fisher_exact(&ContingencyTable2x2::new(a, b, c, d)).map_err(to_py)
}

/// Fréchet distance between two row-sample feature matrices.
#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let matrix = |rows: &[Vec<f64>]| -> PyResult<nalgebra::DMatrix<f64>> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged feature rows"));
        }
        Ok(nalgebra::DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    };
    detection::fid(&matrix(&a)?, &matrix(&b)?).map_err(to_py)
}

/// Resolved experiment configuration of a named preset, as a dict.
#[pyfunction]
fn preset<'py>(py: Python<'py>, name: &str, output_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &ExperimentConfig::preset(name, output_dir).map_err(to_py)?)
}

/// Runs the full pipeline from YAML/JSON config text; returns the report as a dict.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_text(config)?;
    cfg.validate().map_err(to_py)?;
    let outcome = py.detach(|| dm::pipeline::run_pipeline(&cfg, &mut |_| {})).map_err(to_py)?;
    to_object(py, &outcome.report)
}

#[pymodule]
fn diffmark(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Codec>()?;
    m.add_function(wrap_pyfunction!(mark_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(chi_squared, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("PRESETS", PRESETS.to_vec())?;
    Ok(())
}
