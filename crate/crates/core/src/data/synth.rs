//! Seeded synthetic inspection corpus: smooth value-noise surfaces, with one
//! dark line or blob defect painted onto each anomalous image.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcddError, Result};
use crate::loss::Label;

/// Sidecar listing each anomalous file with its defect bounding box.
pub const DEFECTS_FILE: &str = "defects.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Line,
    Blob,
}

impl std::str::FromStr for DefectKind {
    type Err = FcddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(DefectKind::Line),
            "blob" => Ok(DefectKind::Blob),
            other => Err(FcddError::InvalidParameter(format!("unknown defect kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for DefectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DefectKind::Line => "line",
            DefectKind::Blob => "blob",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// `(height, width)` in pixels.
    pub size: (usize, usize),
    /// Lattice spacing of the coarse noise octave, in pixels.
    pub texture_scale: f64,
    pub defect: DefectKind,
    /// Fractional darkening inside the defect: `v ← v·(1 − contrast)`.
    pub contrast: f64,
    /// Line thickness in pixels.
    pub line_width: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_normal: 400,
            n_anomalous: 100,
            size: (224, 224),
            texture_scale: 32.0,
            defect: DefectKind::Line,
            contrast: 0.5,
            line_width: 5.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FcddError::InvalidParameter(m));
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast must lie in (0, 1], got {}", self.contrast));
        }
        if !(self.texture_scale >= 2.0 && self.texture_scale.is_finite()) {
            return bad(format!(
                "texture scale must be at least 2 pixels, got {}",
                self.texture_scale
            ));
        }
        if !(self.line_width >= 1.0 && self.line_width.is_finite()) {
            return bad(format!("line width must be at least 1 pixel, got {}", self.line_width));
        }
        if self.size.0 < 32 || self.size.1 < 32 {
            return bad(format!("image size must be at least 32x32, got {:?}", self.size));
        }
        Ok(())
    }
}

/// Where a defect was painted, with an inclusive pixel bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectRecord {
    /// Path relative to the corpus root.
    pub file: String,
    pub kind: DefectKind,
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
    pub pixels: usize,
}

impl DefectRecord {
    /// Bounding box `(row_min, col_min, row_max, col_max)` mapped from an image
    /// of size `from` onto one of size `to`, widened to cover every target
    /// pixel that overlaps the source box.
    pub fn scaled_bbox(&self, from: (usize, usize), to: (usize, usize)) -> (usize, usize, usize, usize) {
        let sr = to.0 as f64 / from.0 as f64;
        let sc = to.1 as f64 / from.1 as f64;
        let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
        let hi = |v: usize, s: f64, n: usize| ((((v + 1) as f64) * s).ceil() as usize).saturating_sub(1).min(n - 1);
        (
            lo(self.row_min, sr),
            lo(self.col_min, sc),
            hi(self.row_max, sr, to.0),
            hi(self.col_max, sc, to.1),
        )
    }
}

fn stream_rng(seed: u64, label: Label, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.as_u8() as u64) << 62) | ((index as u64) << 1) | purpose);
    rng
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise: uniform lattice values, smoothstep-interpolated.
fn value_noise(rng: &mut ChaCha8Rng, (h, w): (usize, usize), spacing: f64) -> Vec<f64> {
    let gh = (h as f64 / spacing).ceil() as usize + 2;
    let gw = (w as f64 / spacing).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fr = r as f64 / spacing;
        let (i, tr) = (fr.floor() as usize, smoothstep(fr.fract()));
        for c in 0..w {
            let fc = c as f64 / spacing;
            let (j, tc) = (fc.floor() as usize, smoothstep(fc.fract()));
            let at = |a: usize, b: usize| lattice[a * gw + b];
            let top = at(i, j) * (1.0 - tc) + at(i, j + 1) * tc;
            let bottom = at(i + 1, j) * (1.0 - tc) + at(i + 1, j + 1) * tc;
            out.push(top * (1.0 - tr) + bottom * tr);
        }
    }
    out
}

/// Intensities in `[0, 1]` per channel, row-major `h × w × 3`.
fn texture(p: &SynthParams, label: Label, index: usize) -> Vec<f64> {
    let mut rng = stream_rng(p.seed, label, index, 0);
    let coarse = value_noise(&mut rng, p.size, p.texture_scale);
    let fine = value_noise(&mut rng, p.size, p.texture_scale / 2.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..=1.0));
    let mut out = Vec::with_capacity(coarse.len() * 3);
    for (a, b) in coarse.iter().zip(&fine) {
        let v = 0.35 + 0.4 * (0.65 * a + 0.35 * b);
        out.extend(tint.iter().map(|t| v * t));
    }
    out
}

fn to_image(values: &[f64], (h, w): (usize, usize)) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = (y as usize * w + x as usize) * 3;
        Rgb(std::array::from_fn(|c| {
            (values[k + c] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Boolean defect mask, row-major `h × w`.
fn defect_mask(p: &SynthParams, index: usize) -> Vec<bool> {
    let (h, w) = p.size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = stream_rng(p.seed, Label::Anomalous, index, 1);
    let margin = 8.0;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match p.defect {
        DefectKind::Line => {
            let short = hf.min(wf);
            let len = rng.random_range(0.25..0.5) * short;
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (hr, hc) = (0.5 * len * angle.sin(), 0.5 * len * angle.cos());
            let cr = rng.random_range(margin + hr.abs()..hf - margin - hr.abs());
            let cc = rng.random_range(margin + hc.abs()..wf - margin - hc.abs());
            let (a, b) = ((cr - hr, cc - hc), (cr + hr, cc + hc));
            let half = p.line_width / 2.0;
            Box::new(move |r, c| segment_distance((r, c), a, b) <= half)
        }
        DefectKind::Blob => {
            let short = hf.min(wf);
            let ra = rng.random_range(0.04..0.09) * short;
            let rb = rng.random_range(0.04..0.09) * short;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let reach = ra.max(rb);
            let cr = rng.random_range(margin + reach..hf - margin - reach);
            let cc = rng.random_range(margin + reach..wf - margin - reach);
            let (s, co) = theta.sin_cos();
            Box::new(move |r, c| {
                let (dr, dc) = (r - cr, c - cc);
                let (u, v) = (dr * co + dc * s, -dr * s + dc * co);
                (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
            })
        }
    };
    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            mask.push(inside(r as f64, c as f64));
        }
    }
    mask
}

/// Defect-free surface for sample `index` of class `label`; for anomalous
/// samples this is the image before the defect is painted.
pub fn synth_background(p: &SynthParams, label: Label, index: usize) -> RgbImage {
    to_image(&texture(p, label, index), p.size)
}

/// File name of sample `index` relative to the corpus root.
fn sample_file(label: Label, index: usize) -> String {
    match label {
        Label::Normal => format!("normal/normal_{index:04}.png"),
        Label::Anomalous => format!("anomalous/anomalous_{index:04}.png"),
    }
}

/// One synthetic sample and, for anomalous ones, where its defect lies.
pub fn synth_sample(p: &SynthParams, label: Label, index: usize) -> (RgbImage, Option<DefectRecord>) {
    let mut values = texture(p, label, index);
    if label == Label::Normal {
        return (to_image(&values, p.size), None);
    }
    let mask = defect_mask(p, index);
    let w = p.size.1;
    let (mut rmin, mut cmin, mut rmax, mut cmax, mut count) = (usize::MAX, usize::MAX, 0, 0, 0);
    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (r, c) = (k / w, k % w);
        for v in &mut values[k * 3..k * 3 + 3] {
            *v *= 1.0 - p.contrast;
        }
        rmin = rmin.min(r);
        cmin = cmin.min(c);
        rmax = rmax.max(r);
        cmax = cmax.max(c);
        count += 1;
    }
    let record = DefectRecord {
        file: sample_file(label, index),
        kind: p.defect,
        row_min: rmin,
        col_min: cmin,
        row_max: rmax,
        col_max: cmax,
        pixels: count,
    };
    (to_image(&values, p.size), Some(record))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => FcddError::write(path, io),
            other => FcddError::write(path, std::io::Error::other(other.to_string())),
        })
}

/// Writes `normal/` and `anomalous/` PNGs plus the defect sidecar under `out`.
pub fn synth_dataset(p: &SynthParams, out: &Path) -> Result<Vec<DefectRecord>> {
    p.validate()?;
    for sub in ["normal", "anomalous"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| FcddError::write(&dir, e))?;
    }
    for i in 0..p.n_normal {
        let (img, _) = synth_sample(p, Label::Normal, i);
        save_png(&img, &out.join(sample_file(Label::Normal, i)))?;
    }
    let mut defects = Vec::with_capacity(p.n_anomalous);
    for i in 0..p.n_anomalous {
        let (img, record) = synth_sample(p, Label::Anomalous, i);
        save_png(&img, &out.join(sample_file(Label::Anomalous, i)))?;
        defects.push(record.expect("anomalous samples carry a defect"));
    }
    let path = out.join(DEFECTS_FILE);
    let mut buf = Vec::new();
    writeln!(buf, "file\tkind\trow_min\tcol_min\trow_max\tcol_max\tpixels").expect("in-memory write");
    for d in &defects {
        writeln!(
            buf,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            d.file, d.kind, d.row_min, d.col_min, d.row_max, d.col_max, d.pixels
        )
        .expect("in-memory write");
    }
    std::fs::write(&path, buf).map_err(|e| FcddError::write(&path, e))?;
    Ok(defects)
}

/// Reads a defect sidecar written by [`synth_dataset`].
pub fn read_defects(path: &Path) -> Result<Vec<DefectRecord>> {
    let file = std::fs::File::open(path).map_err(|e| FcddError::io(path, e))?;
    let bad = |n: usize| FcddError::InvalidInput(format!("{}: malformed line {n}", path.display()));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FcddError::io(path, e))?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad(n + 1));
        }
        let num = |k: usize| cols[k].parse::<usize>().map_err(|_| bad(n + 1));
        out.push(DefectRecord {
            file: cols[0].to_string(),
            kind: cols[1].parse()?,
            row_min: num(2)?,
            col_min: num(3)?,
            row_max: num(4)?,
            col_max: num(5)?,
            pixels: num(6)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scan_dataset;

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            n_normal: 4,
            n_anomalous: 2,
            size: (64, 64),
            seed,
            ..Default::default()
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["normal", "anomalous"] {
            let mut files: Vec<_> = std::fs::read_dir(root.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            for f in files {
                out.push((
                    f.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&f).unwrap(),
                ));
            }
        }
        out.push((DEFECTS_FILE.into(), std::fs::read(root.join(DEFECTS_FILE)).unwrap()));
        out
    }

    #[test]
    fn writes_expected_layout_deterministically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&small(3), a.path()).unwrap();
        synth_dataset(&small(3), b.path()).unwrap();
        let (m, skipped) = scan_dataset(a.path()).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(m.records.len(), 6);
        assert_eq!(m.class_counts(None), (4, 2));
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

        let c = tempfile::tempdir().unwrap();
        synth_dataset(&small(4), c.path()).unwrap();
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn defect_changes_at_least_its_pixels() {
        for kind in [DefectKind::Line, DefectKind::Blob] {
            let p = SynthParams {
                defect: kind,
                ..small(11)
            };
            for i in 0..p.n_anomalous {
                let bg = synth_background(&p, Label::Anomalous, i);
                let (img, rec) = synth_sample(&p, Label::Anomalous, i);
                let rec = rec.unwrap();
                let differing = bg.pixels().zip(img.pixels()).filter(|(a, b)| a != b).count();
                assert!(rec.pixels > 0);
                assert!(differing >= rec.pixels, "{kind}: {differing} < {}", rec.pixels);
                assert!(rec.row_min <= rec.row_max && rec.row_max < 64);
            }
        }
    }

    #[test]
    fn line_width_respected() {
        let p = SynthParams::default();
        let (_, rec) = synth_sample(&p, Label::Anomalous, 0);
        let rec = rec.unwrap();
        let extent = (rec.row_max - rec.row_min + 1).max(rec.col_max - rec.col_min + 1);
        // a 5 px wide segment at least a quarter of the image long
        assert!(extent >= 56);
        assert!(rec.pixels as f64 >= 0.8 * 5.0 * 56.0);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let written = synth_dataset(&small(5), dir.path()).unwrap();
        assert_eq!(read_defects(&dir.path().join(DEFECTS_FILE)).unwrap(), written);
    }

    #[test]
    fn bbox_scaling() {
        let d = DefectRecord {
            file: String::new(),
            kind: DefectKind::Blob,
            row_min: 10,
            col_min: 20,
            row_max: 11,
            col_max: 21,
            pixels: 4,
        };
        assert_eq!(d.scaled_bbox((64, 64), (64, 64)), (10, 20, 11, 21));
        assert_eq!(d.scaled_bbox((64, 64), (128, 128)), (20, 40, 23, 43));
    }

    #[test]
    fn invalid_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams {
            contrast: 0.0,
            ..small(0)
        };
        assert!(synth_dataset(&p, dir.path()).is_err());
    }
}
