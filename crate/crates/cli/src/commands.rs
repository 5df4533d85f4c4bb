use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use fcdd::backbone::receptive_geometry;
use fcdd::config::{RunConfig, KEYS};
use fcdd::data::{parse_ratio, scan_dataset, split_manifest, synth_dataset, DatasetManifest, Split};
use fcdd::eval::{
    apply_threshold, calibrate_threshold, classification_metrics, image_map, score_dataset, write_scores,
};
use fcdd::heatmap::{display_normalize, render_heatmap_image, score_histogram, upsample_heatmap};
use fcdd::loss::anomaly_score;
use fcdd::train::{load_checkpoint, save_checkpoint, train_with_observer, write_train_log, EpochRecorder};

use crate::Common;

pub const MANIFEST: &str = "manifest.tsv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const SCORES: &str = "scores.tsv";
pub const METRICS: &str = "metrics.txt";
pub const HISTOGRAM: &str = "histogram.tsv";
pub const HEATMAPS: &str = "heatmaps";
pub const CONFIG_ECHO: &str = "config.txt";

fn ratio_arg(s: &str) -> std::result::Result<String, String> {
    parse_ratio(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn split_arg(s: &str) -> std::result::Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

pub fn key_listing() -> String {
    let defaults = RunConfig::default().to_text();
    let mut out = String::new();
    for line in defaults.lines() {
        let (key, value) = line.split_once('=').expect("key=value");
        let doc = KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d);
        out.push_str(&format!("{key:24} {value:12} {doc}\n"));
    }
    out
}

/// Defaults, then the config file, then `--set`, then command flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        cfg.set(k.trim(), v)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn path_flag(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut out = BufWriter::new(file);
    f(&mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("cannot write {}", path.display()))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_text();
    write_file(&dir.join(CONFIG_ECHO), |out| out.write_all(text.as_bytes()))
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    create_dir(&dir)?;
    Ok(dir)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        bail!("manifest not found: {}", path.display());
    }
    Ok(DatasetManifest::load(path)?)
}

fn load_model(path: &Path) -> Result<fcdd::train::Checkpoint> {
    if !path.is_file() {
        bail!("model not found: {}", path.display());
    }
    load_checkpoint(path).with_context(|| format!("cannot load model {}", path.display()))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_anomalous: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as HxW [default: 224x224]
    #[arg(long)]
    size: Option<String>,
    /// line or blob [default: line]
    #[arg(long)]
    defect: Option<String>,
    /// Fractional darkening inside defects [default: 0.5]
    #[arg(long)]
    contrast: Option<f64>,
}

pub fn synth(common: &Common, a: SynthArgs) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("data.root", Some(a.out.display().to_string())),
            ("synth.n_normal", some(&a.n_normal)),
            ("synth.n_anomalous", some(&a.n_anomalous)),
            ("seed", some(&a.seed)),
            ("synth.size", a.size.clone()),
            ("synth.defect", a.defect.clone()),
            ("synth.contrast", some(&a.contrast)),
        ],
    )?;
    let params = cfg.synth_params();
    let defects = synth_dataset(&params, &a.out)?;
    echo_config(&cfg, &a.out)?;
    log::info!(
        "wrote {} normal and {} anomalous images ({} defects) to {}",
        params.n_normal,
        params.n_anomalous,
        defects.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Dataset directory holding normal/ and anomalous/
    #[arg(long)]
    input: Option<PathBuf>,
    /// train:calibration:test [default: 7:1:2]
    #[arg(long, value_parser = ratio_arg)]
    ratio: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn split(common: &Common, a: SplitArgs) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("data.root", path_flag(&a.input)),
            ("data.ratio", a.ratio.clone()),
            ("seed", some(&a.seed)),
            ("out.dir", path_flag(&a.out)),
        ],
    )?;
    let Some(root) = cfg.data_root.clone() else {
        bail!("no dataset given: pass --input or set data.root");
    };
    let (scanned, skipped) = scan_dataset(&root)?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let (manifest, warnings) = split_manifest(&scanned, cfg.ratio, cfg.seed)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let dir = run_dir(&cfg)?;
    let path = dir.join(MANIFEST);
    manifest.save(&path)?;
    echo_config(&cfg, &dir)?;
    for s in Split::ALL {
        let (n, an) = manifest.class_counts(Some(s));
        log::info!("{s}: {n} normal, {an} anomalous");
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Split manifest [default: <out>/manifest.tsv]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// cnn27, vgg16, resnet101 or inceptionv3 [default: cnn27]
    #[arg(long)]
    backbone: Option<String>,
    /// Pretrained archive for the deeper backbones
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Network input as HxW [default: 224x224]
    #[arg(long)]
    input_size: Option<String>,
    /// Train on normal images only
    #[arg(long)]
    normal_only: bool,
}

pub fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("out.dir", path_flag(&a.out)),
            ("train.epochs", some(&a.epochs)),
            ("train.batch_size", some(&a.batch_size)),
            ("train.learning_rate", some(&a.learning_rate)),
            ("seed", some(&a.seed)),
            ("train.backbone", a.backbone.clone()),
            ("train.weights", path_flag(&a.weights)),
            ("train.input_size", a.input_size.clone()),
            ("train.use_anomalous", a.normal_only.then(|| "false".to_string())),
        ],
    )?;
    let manifest_path = a.manifest.unwrap_or_else(|| cfg.out_dir.join(MANIFEST));
    let manifest = load_manifest(&manifest_path)?;
    let dir = run_dir(&cfg)?;
    let tc = cfg.train_config();
    log::info!(
        "training {} for {} epochs (batch {}, lr {}, seed {})",
        tc.backbone,
        tc.epochs,
        tc.batch_size,
        tc.learning_rate,
        tc.seed
    );
    let mut recorder = EpochRecorder::default();
    let checkpoint = train_with_observer(&tc, &manifest, &mut recorder)?;
    save_checkpoint(&checkpoint, &dir.join(CHECKPOINT))?;
    write_file(&dir.join(TRAIN_LOG), |out| write_train_log(&recorder.epochs, out))?;
    echo_config(&cfg, &dir)?;
    log::info!("wrote {}", dir.join(CHECKPOINT).display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Trained checkpoint [default: <out>/checkpoint.bin]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split manifest [default: <out>/manifest.tsv]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, calibration or test
    #[arg(long, default_value = "test", value_parser = split_arg)]
    split: Split,
    /// Also write predictions at this threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Run directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn score(common: &Common, a: ScoreArgs) -> Result<()> {
    let cfg = resolve(common, &[("out.dir", path_flag(&a.out))])?;
    let model = load_model(&a.model.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT)))?;
    let manifest = load_manifest(&a.manifest.unwrap_or_else(|| cfg.out_dir.join(MANIFEST)))?;
    let mut records = score_dataset(&model, &manifest, a.split)?;
    if let Some(t) = a.threshold {
        apply_threshold(&mut records, t);
    }
    let dir = run_dir(&cfg)?;
    write_file(&dir.join(SCORES), |out| write_scores(&records, out))?;
    echo_config(&cfg, &dir)?;
    log::info!(
        "scored {} {} images into {}",
        records.len(),
        a.split,
        dir.join(SCORES).display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint [default: <out>/checkpoint.bin]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split manifest [default: <out>/manifest.tsv]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Use this threshold instead of calibrating one
    #[arg(long)]
    threshold: Option<f64>,
    /// Score histogram bins [default: 20]
    #[arg(long)]
    bins: Option<usize>,
    /// Run directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(common: &Common, a: EvalArgs) -> Result<()> {
    let cfg = resolve(common, &[("out.dir", path_flag(&a.out)), ("eval.bins", some(&a.bins))])?;
    let model = load_model(&a.model.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT)))?;
    let manifest = load_manifest(&a.manifest.unwrap_or_else(|| cfg.out_dir.join(MANIFEST)))?;
    let threshold = match a.threshold {
        Some(t) => t,
        None => {
            let calibration = score_dataset(&model, &manifest, Split::Calibration)?;
            calibrate_threshold(&calibration).context("threshold calibration failed")?
        }
    };
    let mut test = score_dataset(&model, &manifest, Split::Test)?;
    let report = classification_metrics(&mut test, threshold)?;
    let mut doc = Vec::new();
    report.write_text(&mut doc)?;
    let scores: Vec<f64> = test.iter().map(|r| r.score).collect();
    let labels: Vec<_> = test.iter().map(|r| r.label).collect();
    let histogram = score_histogram(&scores, &labels, cfg.histogram_bins)?;

    let dir = run_dir(&cfg)?;
    write_file(&dir.join(METRICS), |out| out.write_all(&doc))?;
    write_file(&dir.join(SCORES), |out| write_scores(&test, out))?;
    write_file(&dir.join(HISTOGRAM), |out| histogram.write_tsv(out))?;
    echo_config(&cfg, &dir)?;
    print!("{}", String::from_utf8_lossy(&doc));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    /// Trained checkpoint [default: <out>/checkpoint.bin]
    #[arg(long)]
    model: Option<PathBuf>,
    /// An image file or a directory searched recursively
    #[arg(long)]
    images: PathBuf,
    /// Gaussian standard deviation in pixels [default: 8]
    #[arg(long)]
    sigma: Option<f64>,
    /// Fraction of the range shown before saturation [default: 0.25]
    #[arg(long)]
    quantile: Option<f64>,
    /// relative or absolute-fraction [default: relative]
    #[arg(long)]
    display_range: Option<String>,
    /// blue-yellow-red or gray [default: blue-yellow-red]
    #[arg(long)]
    colormap: Option<String>,
    /// Blend over the source image
    #[arg(long)]
    underlay: bool,
    /// Run directory [default: run]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("cannot read {}", dir.display()))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

/// Output name: the path below `base` without extension, separators
/// replaced by `_`.
fn heatmap_name(base: &Path, image: &Path) -> String {
    let rel = image.strip_prefix(base).unwrap_or(image).with_extension("");
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    parts.join("_")
}

pub fn heatmap(common: &Common, a: HeatmapArgs) -> Result<()> {
    let cfg = resolve(
        common,
        &[
            ("out.dir", path_flag(&a.out)),
            ("heatmap.sigma", some(&a.sigma)),
            ("heatmap.quantile", some(&a.quantile)),
            ("heatmap.display_range", a.display_range.clone()),
            ("heatmap.colormap", a.colormap.clone()),
            ("heatmap.underlay", a.underlay.then(|| "true".to_string())),
        ],
    )?;
    let model = load_model(&a.model.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT)))?;
    let (images, base) = if a.images.is_dir() {
        let mut v = Vec::new();
        collect_images(&a.images, &mut v)?;
        (v, a.images.clone())
    } else if a.images.is_file() {
        (
            vec![a.images.clone()],
            a.images.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    } else {
        bail!("images not found: {}", a.images.display());
    };
    if images.is_empty() {
        bail!("no png or jpeg images under {}", a.images.display());
    }
    let geometry = receptive_geometry(&model.spec)?;
    let dir = run_dir(&cfg)?.join(HEATMAPS);
    create_dir(&dir)?;

    let mut index = Vec::new();
    for path in &images {
        let map = image_map(&model, path)?;
        let score = anomaly_score(&map);
        let hm = upsample_heatmap(&map, &geometry, &cfg.heatmap)?;
        let shown = display_normalize(&hm, &cfg.heatmap);
        let underlay = if cfg.heatmap_underlay {
            let img = image::open(path).with_context(|| format!("cannot read {}", path.display()))?;
            Some(img.to_rgb8())
        } else {
            None
        };
        let file = format!("{}.png", heatmap_name(&base, path));
        render_heatmap_image(&shown, &cfg.heatmap, underlay.as_ref(), &dir.join(&file))?;
        index.push((path.clone(), score, file));
    }
    write_file(&dir.join("index.tsv"), |out| {
        writeln!(out, "image\tscore\theatmap")?;
        for (p, s, f) in &index {
            writeln!(out, "{}\t{s}\t{f}", p.display())?;
        }
        Ok(())
    })?;
    echo_config(&cfg, &cfg.out_dir)?;
    log::info!("wrote {} heatmaps to {}", index.len(), dir.display());
    Ok(())
}
