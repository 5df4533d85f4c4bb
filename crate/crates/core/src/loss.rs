//! Pseudo-Huber data-description losses and the receptive-field anomaly score.
//!
//! A backbone maps an image to a `u × v × C` feature volume. Each spatial cell
//! is reduced to a scalar response through the pseudo-Huber function
//! `H(z) = sqrt(‖z‖² + 1) − 1` applied to the cell's channel vector. Normal
//! samples are penalised by their mean response; anomalous samples by
//! `−log(1 − exp(−mean response))`. The anomaly score is the plain sum of the
//! response map.
//!
//! All reductions run in row-major order so results are reproducible bit for
//! bit.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FcddError, Result};

/// Default clamp on the mean response inside the anomalous log term.
pub const DEFAULT_STABILITY_FLOOR: f64 = 1e-6;

/// Ground-truth class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl TryFrom<u8> for Label {
    type Error = FcddError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            other => Err(FcddError::InvalidInput(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Backbone output for one image, laid out as (rows, cols, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    values: Array3<f64>,
    pub image_id: String,
}

impl FeatureVolume {
    pub fn new(values: Array3<f64>, image_id: impl Into<String>) -> Result<Self> {
        let (u, v, c) = values.dim();
        if u == 0 || v == 0 || c == 0 {
            return Err(FcddError::InvalidInput(format!(
                "feature volume must be non-empty, got {u}x{v}x{c}"
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(FcddError::InvalidInput(
                "feature volume contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            image_id: image_id.into(),
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Per-cell nonnegative pseudo-Huber responses of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceptiveFieldMap {
    values: Array2<f64>,
    pub image_id: String,
}

impl ReceptiveFieldMap {
    pub fn new(values: Array2<f64>, image_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FcddError::InvalidInput(
                "receptive-field map entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            values,
            image_id: image_id.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Mean response over all cells, the `A` of the per-image loss.
    pub fn mean(&self) -> Result<f64> {
        if self.values.is_empty() {
            return Err(FcddError::InvalidInput("receptive-field map is empty".into()));
        }
        Ok(row_major_sum(&self.values) / self.values.len() as f64)
    }
}

/// Feature volumes paired with labels; all volumes share one shape.
#[derive(Debug, Clone)]
pub struct LabeledSampleBatch {
    features: Vec<FeatureVolume>,
    labels: Vec<Label>,
}

impl LabeledSampleBatch {
    pub fn new(features: Vec<FeatureVolume>, labels: Vec<Label>) -> Result<Self> {
        if features.is_empty() {
            return Err(FcddError::InvalidInput("batch is empty".into()));
        }
        if features.len() != labels.len() {
            return Err(FcddError::InvalidInput(format!(
                "batch has {} volumes but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let shape = features[0].dim();
        if let Some(bad) = features.iter().find(|f| f.dim() != shape) {
            return Err(FcddError::InvalidInput(format!(
                "mismatched shapes in batch: {:?} vs {:?}",
                shape,
                bad.dim()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &[FeatureVolume] {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Hypersphere center and numerical clamp for the anomalous term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvddConfig {
    /// Hypersphere center. An empty vector stands for the origin in any dimension.
    pub center: Vec<f64>,
    pub stability_floor: f64,
}

impl Default for SvddConfig {
    fn default() -> Self {
        Self {
            center: Vec::new(),
            stability_floor: DEFAULT_STABILITY_FLOOR,
        }
    }
}

impl SvddConfig {
    pub fn new(center: Vec<f64>, stability_floor: f64) -> Result<Self> {
        let cfg = Self {
            center,
            stability_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_floor(stability_floor: f64) -> Result<Self> {
        Self::new(Vec::new(), stability_floor)
    }

    fn validate(&self) -> Result<()> {
        if !(self.stability_floor > 0.0 && self.stability_floor.is_finite()) {
            return Err(FcddError::InvalidParameter(format!(
                "stability_floor must be positive, got {}",
                self.stability_floor
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(FcddError::InvalidParameter("center contains non-finite values".into()));
        }
        Ok(())
    }
}

/// `sqrt(s + 1) − 1` for `s = ‖z‖²`, written to avoid cancellation near zero.
#[inline]
pub fn pseudo_huber(sq_norm: f64) -> f64 {
    sq_norm / ((sq_norm + 1.0).sqrt() + 1.0)
}

/// `log(1 − exp(−a))` for `a > 0` without catastrophic cancellation.
#[inline]
fn log1mexp(a: f64) -> f64 {
    if a < std::f64::consts::LN_2 {
        (-(-a).exp_m1()).ln()
    } else {
        (-(-a).exp()).ln_1p()
    }
}

fn row_major_sum(values: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for row in values.rows() {
        for &x in row {
            acc += x;
        }
    }
    acc
}

/// Per-image loss term given the mean response `a`.
fn term(a: f64, label: Label, floor: f64) -> f64 {
    match label {
        Label::Normal => a,
        Label::Anomalous => -log1mexp(a.max(floor)),
    }
}

/// Derivative of [`term`] with respect to `a`.
fn term_slope(a: f64, label: Label, floor: f64) -> f64 {
    match label {
        Label::Normal => 1.0,
        // clamped region is flat
        Label::Anomalous if a < floor => 0.0,
        Label::Anomalous => -1.0 / a.exp_m1(),
    }
}

/// Reduce every cell's channel vector to its pseudo-Huber response.
pub fn pseudo_huber_map(features: &FeatureVolume) -> Result<ReceptiveFieldMap> {
    let values = features.values();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(FcddError::InvalidInput(
            "feature volume contains non-finite values".into(),
        ));
    }
    let (u, v, _) = values.dim();
    let mut out = Array2::<f64>::zeros((u, v));
    for x in 0..u {
        for y in 0..v {
            let sq: f64 = values.slice(ndarray::s![x, y, ..]).iter().map(|z| z * z).sum();
            out[[x, y]] = pseudo_huber(sq);
        }
    }
    ReceptiveFieldMap::new(out, features.image_id.clone())
}

/// Image-level loss of one response map: the mean response for normal samples,
/// `−log(1 − exp(−mean))` for anomalous ones.
pub fn huber_bce_loss(map: &ReceptiveFieldMap, label: Label, cfg: &SvddConfig) -> Result<f64> {
    cfg.validate()?;
    let a = map.mean()?;
    Ok(term(a, label, cfg.stability_floor))
}

/// Spatial FCDD objective: batch mean of [`huber_bce_loss`].
pub fn fcdd_spatial_loss(batch: &LabeledSampleBatch, cfg: &SvddConfig) -> Result<f64> {
    cfg.validate()?;
    let mut acc = 0.0;
    for (f, &label) in batch.features().iter().zip(batch.labels()) {
        let map = pseudo_huber_map(f)?;
        acc += huber_bce_loss(&map, label, cfg)?;
    }
    Ok(acc / batch.len() as f64)
}

/// Image-level baseline objective on embedding vectors, measured from the
/// configured center.
pub fn deep_svdd_loss(embeddings: &[Vec<f64>], labels: &[Label], cfg: &SvddConfig) -> Result<f64> {
    cfg.validate()?;
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(FcddError::InvalidInput(format!(
            "need equal nonzero counts of embeddings ({}) and labels ({})",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (e, &label) in embeddings.iter().zip(labels) {
        if !cfg.center.is_empty() && cfg.center.len() != e.len() {
            return Err(FcddError::InvalidInput(format!(
                "embedding dimension {} does not match center dimension {}",
                e.len(),
                cfg.center.len()
            )));
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(FcddError::InvalidInput("embedding contains non-finite values".into()));
        }
        let sq: f64 = e
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let d = x - cfg.center.get(k).copied().unwrap_or(0.0);
                d * d
            })
            .sum();
        acc += term(pseudo_huber(sq), label, cfg.stability_floor);
    }
    Ok(acc / embeddings.len() as f64)
}

/// Sum of all cell responses.
pub fn anomaly_score(map: &ReceptiveFieldMap) -> f64 {
    row_major_sum(map.values())
}

/// Gradient of [`fcdd_spatial_loss`] with respect to every feature entry, one
/// volume per sample.
pub fn loss_gradients(batch: &LabeledSampleBatch, cfg: &SvddConfig) -> Result<Vec<Array3<f64>>> {
    loss_and_gradients(batch, cfg).map(|(_, g)| g)
}

/// Loss and gradients in one pass.
pub fn loss_and_gradients(batch: &LabeledSampleBatch, cfg: &SvddConfig) -> Result<(f64, Vec<Array3<f64>>)> {
    cfg.validate()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (f, &label) in batch.features().iter().zip(batch.labels()) {
        let map = pseudo_huber_map(f)?;
        let a = map.mean()?;
        loss += term(a, label, cfg.stability_floor);

        let cells = map.values().len() as f64;
        let scale = term_slope(a, label, cfg.stability_floor) / (n * cells);
        let mut g = f.values().to_owned();
        for (mut lane, &h) in g.lanes_mut(Axis(2)).into_iter().zip(map.values().iter()) {
            // dH/dz = z / sqrt(‖z‖² + 1) = z / (H + 1)
            let k = scale / (h + 1.0);
            lane.mapv_inplace(|z| z * k);
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}
