//! Python bindings. Arrays cross the boundary as nested lists, so numpy
//! inputs work through `.tolist()` or directly as sequences.

use std::path::PathBuf;

use fcdd::backbone::{backbone_spec, receptive_geometry};
use fcdd::data::{parse_ratio, scan_dataset, split_manifest, synth_dataset, DatasetManifest, Split, SynthParams};
use fcdd::eval::{calibrate_threshold, classification_metrics, image_map, roc_auc_scores, score_dataset};
use fcdd::heatmap::{display_normalize, render_heatmap_image, upsample_heatmap, DisplayRange, HeatmapConfig};
use fcdd::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use fcdd::{FcddError, FeatureVolume, Label, LabeledSampleBatch, SvddConfig};
use ndarray::{Array2, Array3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    fcdd,
    DetectorError,
    PyException,
    "Raised for any failure inside the detector pipeline."
);

fn err(e: FcddError) -> PyErr {
    DetectorError::new_err(e.to_string())
}

type Grid = Vec<Vec<f64>>;
type Volume = Vec<Vec<Vec<f64>>>;
type LayerRow = (String, String, (usize, usize, usize), usize);

fn volume(v: Volume) -> PyResult<Array3<f64>> {
    let h = v.len();
    let w = v.first().map_or(0, Vec::len);
    let c = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(h * w * c);
    for row in v {
        if row.len() != w {
            return Err(PyValueError::new_err("ragged feature volume"));
        }
        for cell in row {
            if cell.len() != c {
                return Err(PyValueError::new_err("ragged feature volume"));
            }
            flat.extend(cell);
        }
    }
    Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn grid(a: &Array2<f64>) -> Grid {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn labels(raw: &[u8]) -> PyResult<Vec<Label>> {
    raw.iter()
        .map(|&l| Label::try_from(l).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect()
}

fn feature(v: Volume) -> PyResult<FeatureVolume> {
    FeatureVolume::new(volume(v)?, "").map_err(err)
}

fn batch(features: Vec<Volume>, raw_labels: &[u8]) -> PyResult<LabeledSampleBatch> {
    let fs = features.into_iter().map(feature).collect::<PyResult<Vec<_>>>()?;
    LabeledSampleBatch::new(fs, labels(raw_labels)?).map_err(err)
}

/// Pseudo-Huber response of every cell of an `h × w × c` feature volume.
#[pyfunction]
fn pseudo_huber_map(features: Volume) -> PyResult<Grid> {
    let map = fcdd::pseudo_huber_map(&feature(features)?).map_err(err)?;
    Ok(grid(map.values()))
}

/// Sum of the pseudo-Huber responses of a feature volume.
#[pyfunction]
fn anomaly_score(features: Volume) -> PyResult<f64> {
    let map = fcdd::pseudo_huber_map(&feature(features)?).map_err(err)?;
    Ok(fcdd::anomaly_score(&map))
}

/// Batch-mean spatial loss; labels are 0 (normal) or 1 (anomalous).
#[pyfunction]
#[pyo3(signature = (features, labels, stability_floor = 1e-6))]
fn spatial_loss(features: Vec<Volume>, labels: Vec<u8>, stability_floor: f64) -> PyResult<f64> {
    let cfg = SvddConfig::with_floor(stability_floor).map_err(err)?;
    fcdd::fcdd_spatial_loss(&batch(features, &labels)?, &cfg).map_err(err)
}

/// Gradient of `spatial_loss` with respect to every feature entry.
#[pyfunction]
#[pyo3(signature = (features, labels, stability_floor = 1e-6))]
fn loss_gradients(features: Vec<Volume>, labels: Vec<u8>, stability_floor: f64) -> PyResult<Vec<Volume>> {
    let cfg = SvddConfig::with_floor(stability_floor).map_err(err)?;
    let grads = fcdd::loss_gradients(&batch(features, &labels)?, &cfg).map_err(err)?;
    Ok(grads
        .iter()
        .map(|g| {
            g.outer_iter()
                .map(|row| row.outer_iter().map(|c| c.to_vec()).collect())
                .collect()
        })
        .collect())
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    roc_auc_scores(&scores, &self::labels(&labels)?).map_err(err)
}

/// F1-maximising threshold over midpoints of the sorted scores.
#[pyfunction]
fn calibrate(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    fcdd::eval::calibrate_threshold_scores(&scores, &self::labels(&labels)?).map_err(err)
}

/// `(name, type, (h, w, c), params)` per layer.
#[pyfunction]
#[pyo3(signature = (name = "cnn27"))]
fn backbone_summary(name: &str) -> PyResult<Vec<LayerRow>> {
    let spec = backbone_spec(name).map_err(err)?;
    Ok(spec
        .shape_plan()
        .map_err(err)?
        .into_iter()
        .map(|l| (l.name, l.type_tag, l.output, l.params))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (name = "cnn27"))]
fn param_count(name: &str) -> PyResult<usize> {
    let spec = backbone_spec(name).map_err(err)?;
    Ok(spec.param_count().map_err(err)?.total)
}

/// Writes a synthetic corpus and returns the number of injected defects.
#[pyfunction]
#[pyo3(signature = (out, n_normal = 400, n_anomalous = 100, seed = 0, size = (224, 224), defect = "line"))]
fn synth(
    out: PathBuf,
    n_normal: usize,
    n_anomalous: usize,
    seed: u64,
    size: (usize, usize),
    defect: &str,
) -> PyResult<usize> {
    let params = SynthParams {
        n_normal,
        n_anomalous,
        seed,
        size,
        defect: defect.parse().map_err(err)?,
        ..Default::default()
    };
    Ok(synth_dataset(&params, &out).map_err(err)?.len())
}

/// Scans `root`, splits it and saves the manifest. Returns
/// `{split: (normal, anomalous)}`.
#[pyfunction]
#[pyo3(signature = (root, manifest, ratio = "7:1:2", seed = 0))]
fn split<'py>(
    py: Python<'py>,
    root: PathBuf,
    manifest: PathBuf,
    ratio: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ratio = parse_ratio(ratio).map_err(err)?;
    let (scanned, _) = scan_dataset(&root).map_err(err)?;
    let (m, _) = split_manifest(&scanned, ratio, seed).map_err(err)?;
    m.save(&manifest).map_err(err)?;
    let out = PyDict::new(py);
    for s in Split::ALL {
        out.set_item(s.as_str(), m.class_counts(Some(s)))?;
    }
    Ok(out)
}

fn heatmap_config(sigma: f64, quantile: f64, display_range: &str) -> PyResult<HeatmapConfig> {
    let cfg = HeatmapConfig {
        sigma,
        display_quantile: quantile,
        display_range: display_range.parse::<DisplayRange>().map_err(err)?,
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// A trained or freshly initialised detector.
#[pyclass(module = "fcdd")]
struct Detector {
    inner: Checkpoint,
}

#[pymethods]
impl Detector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    /// Untrained detector, as `train(epochs=0)` would produce.
    #[staticmethod]
    #[pyo3(signature = (backbone = "cnn27", seed = 0, input_size = (224, 224)))]
    fn init(backbone: &str, seed: u64, input_size: (usize, usize)) -> PyResult<Self> {
        let config = TrainConfig {
            backbone: backbone.into(),
            seed,
            input_size,
            epochs: 0,
            ..Default::default()
        };
        let (spec, params) = config.build_model().map_err(err)?;
        Ok(Self {
            inner: Checkpoint {
                version: CHECKPOINT_VERSION,
                spec,
                params,
                config,
                epoch: 0,
                loss_trace: Vec::new(),
            },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn backbone(&self) -> String {
        self.inner.spec.name.clone()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        fcdd::eval::input_size(&self.inner)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.loss_trace.clone()
    }

    /// Pseudo-Huber response map of one image file.
    fn response_map(&self, path: PathBuf) -> PyResult<Grid> {
        let map = image_map(&self.inner, &path).map_err(err)?;
        Ok(grid(map.values()))
    }

    fn score_image(&self, path: PathBuf) -> PyResult<f64> {
        let map = image_map(&self.inner, &path).map_err(err)?;
        Ok(fcdd::anomaly_score(&map))
    }

    /// Full-resolution heatmap of one image, before display normalisation.
    #[pyo3(signature = (path, sigma = 8.0))]
    fn heatmap(&self, path: PathBuf, sigma: f64) -> PyResult<Grid> {
        let cfg = heatmap_config(sigma, 1.0, "relative")?;
        let map = image_map(&self.inner, &path).map_err(err)?;
        let geo = receptive_geometry(&self.inner.spec).map_err(err)?;
        Ok(grid(&upsample_heatmap(&map, &geo, &cfg).map_err(err)?.values))
    }

    /// Renders the display-normalised heatmap of `path` to a PNG at `out`.
    #[pyo3(signature = (path, out, sigma = 8.0, quantile = 0.25, display_range = "relative"))]
    fn render_heatmap(
        &self,
        path: PathBuf,
        out: PathBuf,
        sigma: f64,
        quantile: f64,
        display_range: &str,
    ) -> PyResult<()> {
        let cfg = heatmap_config(sigma, quantile, display_range)?;
        let map = image_map(&self.inner, &path).map_err(err)?;
        let geo = receptive_geometry(&self.inner.spec).map_err(err)?;
        let hm = upsample_heatmap(&map, &geo, &cfg).map_err(err)?;
        render_heatmap_image(&display_normalize(&hm, &cfg), &cfg, None, &out).map_err(err)
    }

    /// `(id, score, label)` for every record of one split.
    #[pyo3(signature = (manifest, split = "test"))]
    fn score_split(&self, manifest: PathBuf, split: &str) -> PyResult<Vec<(String, f64, u8)>> {
        let m = DatasetManifest::load(&manifest).map_err(err)?;
        let split: Split = split.parse().map_err(err)?;
        let records = score_dataset(&self.inner, &m, split).map_err(err)?;
        Ok(records.into_iter().map(|r| (r.id, r.score, r.label.as_u8())).collect())
    }

    /// Calibrates on the calibration split (unless `threshold` is given) and
    /// returns the test metrics as a dict.
    #[pyo3(signature = (manifest, threshold = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        threshold: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = DatasetManifest::load(&manifest).map_err(err)?;
        let t = match threshold {
            Some(t) => t,
            None => {
                calibrate_threshold(&score_dataset(&self.inner, &m, Split::Calibration).map_err(err)?).map_err(err)?
            }
        };
        let mut test = score_dataset(&self.inner, &m, Split::Test).map_err(err)?;
        let r = classification_metrics(&mut test, t).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("auc", r.auc)?;
        out.set_item("f1", r.f1)?;
        out.set_item("precision", r.precision)?;
        out.set_item("recall", r.recall)?;
        out.set_item("threshold", r.threshold)?;
        out.set_item("tp", r.tp)?;
        out.set_item("fp", r.fp)?;
        out.set_item("fn", r.fn_)?;
        out.set_item("tn", r.tn)?;
        out.set_item("n", r.n)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.input_size();
        format!(
            "Detector(backbone={:?}, input_size=({h}, {w}), epoch={})",
            self.backbone(),
            self.inner.epoch
        )
    }
}

/// Trains a detector on the train split of a saved manifest.
#[pyfunction]
#[pyo3(signature = (
    manifest,
    epochs = 50,
    batch_size = 30,
    learning_rate = 1e-4,
    seed = 0,
    backbone = "cnn27",
    input_size = (224, 224),
    use_anomalous = true,
))]
#[allow(clippy::too_many_arguments)]
fn train_detector(
    py: Python<'_>,
    manifest: PathBuf,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    backbone: &str,
    input_size: (usize, usize),
    use_anomalous: bool,
) -> PyResult<Detector> {
    let m = DatasetManifest::load(&manifest).map_err(err)?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        backbone: backbone.into(),
        input_size,
        use_anomalous_in_train: use_anomalous,
        ..Default::default()
    };
    let inner = py.detach(|| train(&cfg, &m)).map_err(err)?;
    Ok(Detector { inner })
}

#[pymodule]
#[pyo3(name = "fcdd")]
fn fcdd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DetectorError", m.py().get_type::<DetectorError>())?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(pseudo_huber_map, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(backbone_summary, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train_detector, m)?)?;
    Ok(())
}
