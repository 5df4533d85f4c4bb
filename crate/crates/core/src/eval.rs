//! Scoring with a trained detector, ROC AUC, threshold calibration and
//! thresholded classification metrics.
//!
//! An image is predicted anomalous when its score is at or above the
//! threshold.

use std::cmp::Ordering;
use std::io::Write;
use std::path::PathBuf;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::backbone::forward_eval;
use crate::data::{load_batch, load_image, DatasetManifest, Split};
use crate::error::{FcddError, Result};
use crate::loss::{anomaly_score, pseudo_huber_map, Label, ReceptiveFieldMap};
use crate::train::Checkpoint;

/// Images per evaluation forward pass.
pub const SCORE_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub path: PathBuf,
    pub score: f64,
    pub label: Label,
    pub predicted: Option<Label>,
}

/// Network input `(height, width)` of a checkpoint.
pub fn input_size(ckpt: &Checkpoint) -> (usize, usize) {
    (ckpt.spec.input_size.0, ckpt.spec.input_size.1)
}

/// Pseudo-Huber response maps of a batch in evaluation mode.
pub fn receptive_maps(ckpt: &Checkpoint, batch: &Array4<f32>) -> Result<Vec<ReceptiveFieldMap>> {
    forward_eval(&ckpt.params, &ckpt.spec, batch)?
        .iter()
        .map(pseudo_huber_map)
        .collect()
}

/// Response map of a single image file.
pub fn image_map(ckpt: &Checkpoint, path: &std::path::Path) -> Result<ReceptiveFieldMap> {
    let img = load_image(path, input_size(ckpt))?;
    let batch = img.insert_axis(ndarray::Axis(0));
    let mut maps = receptive_maps(ckpt, &batch)?;
    let mut map = maps.pop().expect("one image in, one map out");
    map.image_id = path.display().to_string();
    Ok(map)
}

/// Scores every record of `split` in manifest order.
pub fn score_dataset(ckpt: &Checkpoint, m: &DatasetManifest, split: Split) -> Result<Vec<ScoreRecord>> {
    let records = m.split(split);
    if records.is_empty() {
        return Err(FcddError::InvalidInput(format!("split `{split}` is empty")));
    }
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(SCORE_CHUNK) {
        let ids: Vec<&str> = chunk.iter().map(|r| r.id.as_str()).collect();
        let (x, _) = load_batch(m, &ids, input_size(ckpt))?;
        for (record, map) in chunk.iter().zip(receptive_maps(ckpt, &x)?) {
            out.push(ScoreRecord {
                id: record.id.clone(),
                path: record.path.clone(),
                score: anomaly_score(&map),
                label: record.label,
                predicted: None,
            });
        }
    }
    Ok(out)
}

fn class_sizes(labels: impl Iterator<Item = Label>) -> (u64, u64) {
    labels.fold((0, 0), |(n, a), l| match l {
        Label::Normal => (n + 1, a),
        Label::Anomalous => (n, a + 1),
    })
}

fn require_both(n_norm: u64, n_anom: u64, what: &str) -> Result<()> {
    if n_norm == 0 || n_anom == 0 {
        return Err(FcddError::UndefinedMetric(format!(
            "{what} needs both classes, got {n_norm} normal and {n_anom} anomalous"
        )));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FcddError::InvalidInput("scores must be finite".into()));
    }
    Ok(())
}

/// Probability that an anomalous score exceeds a normal one, ties counting
/// half, via mid-ranks.
pub fn roc_auc_scores(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FcddError::InvalidInput("scores and labels differ in length".into()));
    }
    check_scores(scores)?;
    let (n_norm, n_anom) = class_sizes(labels.iter().copied());
    require_both(n_norm, n_anom, "AUC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the anomalous class, kept integral
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end+1 share their mean (start + end + 2) / 2
        let twice_mid = (start + end + 2) as u64;
        let anomalies = order[start..=end].iter().filter(|&&i| labels[i].is_anomalous()).count() as u64;
        twice_rank_sum += twice_mid * anomalies;
        start = end + 1;
    }
    // twice the Mann-Whitney U statistic
    let twice_u = twice_rank_sum - n_anom * (n_anom + 1);
    Ok(twice_u as f64 / (2 * n_anom * n_norm) as f64)
}

pub fn roc_auc(records: &[ScoreRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    roc_auc_scores(&scores, &labels)
}

/// `2·TP / (2·TP + FP + FN)` as an exact fraction.
fn f1_fraction(tp: u64, fp: u64, fn_: u64) -> (u64, u64) {
    (2 * tp, 2 * tp + fp + fn_)
}

fn fraction_gt(a: (u64, u64), b: (u64, u64)) -> bool {
    // a.0 / a.1 > b.0 / b.1 with 0/0 read as 0
    (a.0 as u128) * (b.1 as u128) > (b.0 as u128) * (a.1 as u128) && a.0 > 0
}

/// Candidate thresholds: `−∞`, midpoints between consecutive distinct scores,
/// and `+∞`, in increasing order.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// The candidate threshold with the highest F1, preferring the smallest on
/// ties.
pub fn calibrate_threshold_scores(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FcddError::InvalidInput("scores and labels differ in length".into()));
    }
    check_scores(scores)?;
    let (n_norm, n_anom) = class_sizes(labels.iter().copied());
    require_both(n_norm, n_anom, "threshold calibration")?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let candidates = threshold_candidates(scores);
    // candidate j predicts anomalous exactly the scores in distinct groups ≥ j
    let (mut tp, mut fp) = (n_anom, n_norm);
    let mut best = (candidates[0], f1_fraction(tp, fp, 0));
    let mut pos = 0;
    for &t in &candidates[1..] {
        while pos < order.len() && scores[order[pos]] < t {
            match labels[order[pos]] {
                Label::Anomalous => tp -= 1,
                Label::Normal => fp -= 1,
            }
            pos += 1;
        }
        let f1 = f1_fraction(tp, fp, n_anom - tp);
        if fraction_gt(f1, best.1) {
            best = (t, f1);
        }
    }
    Ok(best.0)
}

pub fn calibrate_threshold(records: &[ScoreRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    calibrate_threshold_scores(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the records hold a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub n: u64,
    /// No predicted positives.
    pub precision_undefined: bool,
    /// No actual positives.
    pub recall_undefined: bool,
    /// Anomalies tend to score lower than normals.
    pub auc_below_half: bool,
}

/// The decision rule: anomalous iff `score >= threshold`.
pub fn predict(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

/// Fills in `predicted` for every record.
pub fn apply_threshold(records: &mut [ScoreRecord], threshold: f64) {
    for r in records {
        r.predicted = Some(predict(r.score, threshold));
    }
}

/// Thresholds the records (filling in `predicted`) and summarises them.
pub fn classification_metrics(records: &mut [ScoreRecord], threshold: f64) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(FcddError::InvalidInput("no records to evaluate".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    apply_threshold(records, threshold);
    for r in records.iter() {
        let predicted = r.predicted.expect("just assigned");
        match (r.label, predicted) {
            (Label::Anomalous, Label::Anomalous) => tp += 1,
            (Label::Normal, Label::Anomalous) => fp += 1,
            (Label::Anomalous, Label::Normal) => fn_ += 1,
            (Label::Normal, Label::Normal) => tn += 1,
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auc = match roc_auc(records) {
        Ok(a) => Some(a),
        Err(FcddError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        auc,
        f1,
        precision,
        recall,
        threshold,
        tp,
        fp,
        fn_,
        tn,
        n: records.len() as u64,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
        auc_below_half: auc.is_some_and(|a| a < 0.5),
    })
}

impl MetricsReport {
    /// Field names of the metrics document, in order.
    pub const FIELDS: [&'static str; 10] = [
        "auc",
        "f1",
        "precision",
        "recall",
        "threshold",
        "tp",
        "fp",
        "fn",
        "tn",
        "n",
    ];

    /// `key=value` lines for exactly [`Self::FIELDS`], preceded by `#`
    /// comments for any raised flag.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        let auc = self
            .auc
            .ok_or_else(|| FcddError::UndefinedMetric("AUC needs both classes in the evaluated split".into()))?;
        let io = |e: std::io::Error| FcddError::InvalidInput(e.to_string());
        for (flag, text) in [
            (
                self.precision_undefined,
                "precision undefined (no predicted anomalies), reported as 0",
            ),
            (self.recall_undefined, "recall undefined (no anomalies), reported as 0"),
            (self.auc_below_half, "auc below 0.5: anomalies score lower than normals"),
        ] {
            if flag {
                writeln!(out, "# {text}").map_err(io)?;
            }
        }
        let values = [
            auc.to_string(),
            self.f1.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.threshold.to_string(),
            self.tp.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            self.tn.to_string(),
            self.n.to_string(),
        ];
        for (k, v) in Self::FIELDS.iter().zip(values) {
            writeln!(out, "{k}={v}").map_err(io)?;
        }
        Ok(())
    }
}

/// Tab-separated `id, path, score, label, predicted`; unpredicted rows carry
/// `NA`.
pub fn write_scores(records: &[ScoreRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "id\tpath\tscore\tlabel\tpredicted")?;
    for r in records {
        let predicted = r.predicted.map_or("NA".to_string(), |p| p.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            r.path.display(),
            r.score,
            r.label,
            predicted
        )?;
    }
    Ok(())
}

/// Sorts by descending score, then id, for reporting.
pub fn rank_by_score(records: &mut [ScoreRecord]) {
    records.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
}
