//! Flat `section.key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key, so an echoed config reproduces the run it came from.

use std::path::{Path, PathBuf};

use crate::data::{parse_ratio, DefectKind, SynthParams};
use crate::error::{FcddError, Result};
use crate::heatmap::{HeatmapConfig, DEFAULT_BINS};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Root seed for synthesis, splitting and training.
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub ratio: [usize; 3],
    pub train: TrainConfig,
    pub heatmap: HeatmapConfig,
    /// Blend heatmaps over their source image.
    pub heatmap_underlay: bool,
    pub histogram_bins: usize,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            out_dir: PathBuf::from("run"),
            ratio: [7, 1, 2],
            train: TrainConfig::default(),
            heatmap: HeatmapConfig::default(),
            heatmap_underlay: false,
            histogram_bins: DEFAULT_BINS,
            synth: SynthParams::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: [(&str, &str); 28] = [
    ("seed", "root seed for synthesis, splitting and training"),
    ("data.root", "dataset directory holding normal/ and anomalous/"),
    ("data.ratio", "train:calibration:test split ratio"),
    ("out.dir", "run directory"),
    ("train.batch_size", "images per step"),
    ("train.epochs", "passes over the train split"),
    ("train.learning_rate", "Adam step size"),
    ("train.grad_decay", "Adam first-moment decay"),
    ("train.sq_grad_decay", "Adam second-moment decay"),
    ("train.use_anomalous", "include anomalous train images in the loss"),
    ("train.backbone", "cnn27, vgg16, resnet101 or inceptionv3"),
    (
        "train.weights",
        "pretrained archive for the deeper backbones (empty for none)",
    ),
    (
        "train.stability_floor",
        "lower clamp on the mean response of anomalous images",
    ),
    ("train.input_size", "network input as HxW"),
    ("heatmap.sigma", "Gaussian standard deviation in pixels"),
    ("heatmap.quantile", "fraction of the range shown before saturation"),
    ("heatmap.display_range", "relative or absolute-fraction"),
    ("heatmap.colormap", "blue-yellow-red or gray"),
    ("heatmap.truncation", "kernel radius in multiples of sigma"),
    ("heatmap.blend_alpha", "colormap weight over the underlay"),
    ("heatmap.underlay", "blend over the source image"),
    ("eval.bins", "score histogram bins"),
    ("synth.n_normal", "normal images to generate"),
    ("synth.n_anomalous", "anomalous images to generate"),
    ("synth.size", "generated image size as HxW"),
    ("synth.texture_scale", "coarse noise lattice spacing in pixels"),
    ("synth.defect", "line or blob"),
    ("synth.contrast", "fractional darkening inside defects"),
];

/// Keys outside [`KEYS`] that are still accepted.
const EXTRA_KEYS: [&str; 1] = ["synth.line_width"];

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    let bad = || FcddError::Config(format!("{key}: expected HxW, got `{v}`"));
    let (h, w) = v.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FcddError::Config(format!("{key}: cannot parse `{v}`")))
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "data.root" => self.data_root = optional_path(v),
            "data.ratio" => self.ratio = parse_ratio(v).map_err(|e| FcddError::Config(e.to_string()))?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "train.grad_decay" => self.train.grad_decay = parse_value(key, v)?,
            "train.sq_grad_decay" => self.train.sq_grad_decay = parse_value(key, v)?,
            "train.use_anomalous" => self.train.use_anomalous_in_train = parse_value(key, v)?,
            "train.backbone" => self.train.backbone = v.to_string(),
            "train.weights" => self.train.weights = optional_path(v),
            "train.stability_floor" => self.train.stability_floor = parse_value(key, v)?,
            "train.input_size" => self.train.input_size = parse_size(key, v)?,
            "heatmap.sigma" => self.heatmap.sigma = parse_value(key, v)?,
            "heatmap.quantile" => self.heatmap.display_quantile = parse_value(key, v)?,
            "heatmap.display_range" => self.heatmap.display_range = v.parse()?,
            "heatmap.colormap" => self.heatmap.colormap = v.parse()?,
            "heatmap.truncation" => self.heatmap.truncation_radius = parse_value(key, v)?,
            "heatmap.blend_alpha" => self.heatmap.blend_alpha = parse_value(key, v)?,
            "heatmap.underlay" => self.heatmap_underlay = parse_value(key, v)?,
            "eval.bins" => self.histogram_bins = parse_value(key, v)?,
            "synth.n_normal" => self.synth.n_normal = parse_value(key, v)?,
            "synth.n_anomalous" => self.synth.n_anomalous = parse_value(key, v)?,
            "synth.size" => self.synth.size = parse_size(key, v)?,
            "synth.texture_scale" => self.synth.texture_scale = parse_value(key, v)?,
            "synth.defect" => self.synth.defect = v.parse::<DefectKind>()?,
            "synth.contrast" => self.synth.contrast = parse_value(key, v)?,
            "synth.line_width" => self.synth.line_width = parse_value(key, v)?,
            other => return Err(FcddError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FcddError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FcddError::io(path, e))?;
        Self::from_text(&text)
    }

    fn value(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let [a, b, c] = self.ratio;
        match key {
            "seed" => self.seed.to_string(),
            "data.root" => path(&self.data_root),
            "data.ratio" => format!("{a}:{b}:{c}"),
            "out.dir" => self.out_dir.display().to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.grad_decay" => self.train.grad_decay.to_string(),
            "train.sq_grad_decay" => self.train.sq_grad_decay.to_string(),
            "train.use_anomalous" => self.train.use_anomalous_in_train.to_string(),
            "train.backbone" => self.train.backbone.clone(),
            "train.weights" => path(&self.train.weights),
            "train.stability_floor" => self.train.stability_floor.to_string(),
            "train.input_size" => format!("{}x{}", self.train.input_size.0, self.train.input_size.1),
            "heatmap.sigma" => self.heatmap.sigma.to_string(),
            "heatmap.quantile" => self.heatmap.display_quantile.to_string(),
            "heatmap.display_range" => self.heatmap.display_range.to_string(),
            "heatmap.colormap" => self.heatmap.colormap.to_string(),
            "heatmap.truncation" => self.heatmap.truncation_radius.to_string(),
            "heatmap.blend_alpha" => self.heatmap.blend_alpha.to_string(),
            "heatmap.underlay" => self.heatmap_underlay.to_string(),
            "eval.bins" => self.histogram_bins.to_string(),
            "synth.n_normal" => self.synth.n_normal.to_string(),
            "synth.n_anomalous" => self.synth.n_anomalous.to_string(),
            "synth.size" => format!("{}x{}", self.synth.size.0, self.synth.size.1),
            "synth.texture_scale" => self.synth.texture_scale.to_string(),
            "synth.defect" => self.synth.defect.to_string(),
            "synth.contrast" => self.synth.contrast.to_string(),
            "synth.line_width" => self.synth.line_width.to_string(),
            other => unreachable!("no key `{other}`"),
        }
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS.iter().map(|(k, _)| *k).chain(EXTRA_KEYS) {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.value(key));
            out.push('\n');
        }
        out
    }

    /// Training settings with the root seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Synthesis settings with the root seed applied.
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.heatmap.validate().map_err(|e| FcddError::Config(e.to_string()))?;
        self.synth_params()
            .validate()
            .map_err(|e| FcddError::Config(e.to_string()))?;
        if self.histogram_bins == 0 {
            return Err(FcddError::Config("eval.bins must be at least 1".into()));
        }
        Ok(())
    }
}
