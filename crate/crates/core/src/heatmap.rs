//! Full-resolution anomaly heatmaps from receptive-field maps.
//!
//! Every cell of a `u × v` response map is splatted onto an `h × w` canvas as
//! a normalised 2D Gaussian centred on the cell's receptive field, weighted by
//! the cell's response. The result is linear in the map and, away from the
//! borders, preserves its total mass.
//!
//! For display the heatmap is clamped to a compressed range starting at its
//! minimum and spanning only `display_quantile` of the full range, so that
//! long-tailed responses saturate instead of washing out the colour scale.
//!
//! The colormap is fixed: piecewise-linear from blue `(0, 0, 255)` at 0 through
//! yellow `(255, 255, 0)` at 0.5 to red `(255, 0, 0)` at 1, rounded to the
//! nearest integer per channel.

use std::io::Write;
use std::path::Path;

use image::{imageops::FilterType, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::FieldGeometry;
use crate::error::{FcddError, Result};
use crate::loss::{Label, ReceptiveFieldMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f64>,
    pub image_id: String,
    pub model_id: String,
}

impl Heatmap {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Row and column of the first maximal entry.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colormap {
    BlueYellowRed,
    Gray,
}

impl std::str::FromStr for Colormap {
    type Err = FcddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blue-yellow-red" => Ok(Colormap::BlueYellowRed),
            "gray" => Ok(Colormap::Gray),
            other => Err(FcddError::InvalidParameter(format!("unknown colormap `{other}`"))),
        }
    }
}

impl std::fmt::Display for Colormap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Colormap::BlueYellowRed => "blue-yellow-red",
            Colormap::Gray => "gray",
        })
    }
}

impl Colormap {
    /// Colour of a value in `[0, 1]` (clamped).
    pub fn lookup(self, t: f64) -> [u8; 3] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let rgb = match self {
            Colormap::Gray => [t, t, t],
            Colormap::BlueYellowRed if t <= 0.5 => {
                let s = t / 0.5;
                [s, s, 1.0 - s]
            }
            Colormap::BlueYellowRed => {
                let s = (t - 0.5) / 0.5;
                [1.0, 1.0 - s, 0.0]
            }
        };
        rgb.map(|c| (c * 255.0).round() as u8)
    }
}

/// How the display range upper bound is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisplayRange {
    /// `[min, min + q·(max − min)]`.
    Relative,
    /// `[min, q·max]`.
    AbsoluteFraction,
}

impl std::str::FromStr for DisplayRange {
    type Err = FcddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(DisplayRange::Relative),
            "absolute-fraction" => Ok(DisplayRange::AbsoluteFraction),
            other => Err(FcddError::InvalidParameter(format!("unknown display range `{other}`"))),
        }
    }
}

impl std::fmt::Display for DisplayRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DisplayRange::Relative => "relative",
            DisplayRange::AbsoluteFraction => "absolute-fraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    /// Gaussian standard deviation in input pixels.
    pub sigma: f64,
    pub display_quantile: f64,
    pub display_range: DisplayRange,
    pub colormap: Colormap,
    /// Kernel support radius as a multiple of `sigma`.
    pub truncation_radius: f64,
    /// Weight of the colormap when blending over an underlay.
    pub blend_alpha: f64,
}

/// Stride of the 28×28 grid on a 224×224 input.
pub const DEFAULT_SIGMA: f64 = 8.0;

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            display_quantile: 0.25,
            display_range: DisplayRange::Relative,
            colormap: Colormap::BlueYellowRed,
            truncation_radius: 4.0,
            blend_alpha: 0.5,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(FcddError::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.display_quantile > 0.0 && self.display_quantile <= 1.0) {
            return Err(FcddError::InvalidParameter(format!(
                "display quantile must lie in (0, 1], got {}",
                self.display_quantile
            )));
        }
        if !(self.truncation_radius >= 3.0 && self.truncation_radius.is_finite()) {
            return Err(FcddError::InvalidParameter(format!(
                "truncation radius must be at least 3 sigma, got {}",
                self.truncation_radius
            )));
        }
        if !(0.0..=1.0).contains(&self.blend_alpha) {
            return Err(FcddError::InvalidParameter(format!(
                "blend alpha must lie in [0, 1], got {}",
                self.blend_alpha
            )));
        }
        Ok(())
    }
}

fn gauss_1d(x: f64, m: f64, sigma: f64) -> f64 {
    let d = x - m;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Normalised 2D Gaussian centred at `(m1, m2)` (row, col), evaluated at
/// every integer pixel of an `h × w` grid.
pub fn gaussian_kernel(m1: f64, m2: f64, sigma: f64, h: usize, w: usize) -> Result<Heatmap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FcddError::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let rows: Vec<f64> = (0..h).map(|x| gauss_1d(x as f64, m1, sigma)).collect();
    let cols: Vec<f64> = (0..w).map(|y| gauss_1d(y as f64, m2, sigma)).collect();
    let values = Array2::from_shape_fn((h, w), |(x, y)| norm * rows[x] * cols[y]);
    Ok(Heatmap {
        values,
        image_id: String::new(),
        model_id: String::new(),
    })
}

/// Splats each cell of `map` as `value · G(center, sigma)` onto the input
/// canvas described by `geometry`.
pub fn upsample_heatmap(map: &ReceptiveFieldMap, geometry: &FieldGeometry, cfg: &HeatmapConfig) -> Result<Heatmap> {
    cfg.validate()?;
    if map.dim() != (geometry.rows, geometry.cols) {
        return Err(FcddError::InvalidInput(format!(
            "map is {:?} but geometry describes {}x{} cells",
            map.dim(),
            geometry.rows,
            geometry.cols
        )));
    }
    let (h, w) = (geometry.height, geometry.width);
    let sigma = cfg.sigma;
    let radius = cfg.truncation_radius * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let span = |center: f64, len: usize| {
        let lo = (center - radius).ceil().max(0.0) as usize;
        let hi = ((center + radius).floor() as isize).min(len as isize - 1);
        (lo, hi)
    };

    let mut out = Array2::<f64>::zeros((h, w));
    for ((i, j), &d) in map.values().indexed_iter() {
        if d == 0.0 {
            continue;
        }
        let (c1, c2) = geometry.center(i, j);
        let (r0, r1) = span(c1, h);
        let (k0, k1) = span(c2, w);
        if r1 < r0 as isize || k1 < k0 as isize {
            continue;
        }
        let col_w: Vec<f64> = (k0..=k1 as usize).map(|y| gauss_1d(y as f64, c2, sigma)).collect();
        for x in r0..=r1 as usize {
            let row_w = d * norm * gauss_1d(x as f64, c1, sigma);
            let mut row = out.row_mut(x);
            for (y, cw) in (k0..=k1 as usize).zip(&col_w) {
                row[y] += row_w * cw;
            }
        }
    }
    Ok(Heatmap {
        values: out,
        image_id: map.image_id.clone(),
        model_id: String::new(),
    })
}

/// Maps a heatmap into `[0, 1]` over the configured display range. A constant
/// heatmap maps to all zeros.
pub fn display_normalize(hm: &Heatmap, cfg: &HeatmapConfig) -> Heatmap {
    let lo = hm.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_raw = hm.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = match cfg.display_range {
        DisplayRange::Relative => lo + cfg.display_quantile * (hi_raw - lo),
        DisplayRange::AbsoluteFraction => cfg.display_quantile * hi_raw,
    };
    let span = hi - lo;
    let values = if span > 0.0 && span.is_finite() {
        hm.values.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Array2::zeros(hm.values.raw_dim())
    };
    Heatmap {
        values,
        image_id: hm.image_id.clone(),
        model_id: hm.model_id.clone(),
    }
}

/// Colour-maps a normalised heatmap, optionally alpha-blended over an
/// underlay (resized bilinearly to the heatmap size when needed).
pub fn render_heatmap(hm: &Heatmap, cfg: &HeatmapConfig, underlay: Option<&RgbImage>) -> RgbImage {
    let (h, w) = hm.dim();
    let resized;
    let under = match underlay {
        Some(img) if img.dimensions() != (w as u32, h as u32) => {
            resized = image::imageops::resize(img, w as u32, h as u32, FilterType::Triangle);
            Some(&resized)
        }
        other => other,
    };
    let alpha = cfg.blend_alpha;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = cfg.colormap.lookup(hm.values[[y as usize, x as usize]]);
        match under {
            None => Rgb(c),
            Some(u) => {
                let p = u.get_pixel(x, y).0;
                Rgb([0, 1, 2].map(|k| (alpha * c[k] as f64 + (1.0 - alpha) * p[k] as f64).round() as u8))
            }
        }
    })
}

/// Renders and writes a PNG.
pub fn render_heatmap_image(hm: &Heatmap, cfg: &HeatmapConfig, underlay: Option<&RgbImage>, path: &Path) -> Result<()> {
    let img = render_heatmap(hm, cfg, underlay);
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => FcddError::write(path, io),
            other => FcddError::write(path, std::io::Error::other(other.to_string())),
        })
}

/// Per-class counts of scores over equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub normal: Vec<u64>,
    pub anomalous: Vec<u64>,
}

pub const DEFAULT_BINS: usize = 20;

/// Bins scores into `bins` equal-width bins over `[min, max]`; every bin is
/// left-closed and the last one is also right-closed. If all scores are equal
/// a single unit-width bin centred on that value is used.
pub fn score_histogram(scores: &[f64], labels: &[Label], bins: usize) -> Result<ScoreHistogram> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(FcddError::InvalidInput(format!(
            "need equal nonzero counts of scores ({}) and labels ({})",
            scores.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(FcddError::InvalidInput("histogram needs at least one bin".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FcddError::InvalidInput("scores must be finite".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (edges, bins) = if hi > lo {
        let width = (hi - lo) / bins as f64;
        let mut e: Vec<f64> = (0..bins).map(|k| lo + k as f64 * width).collect();
        e.push(hi);
        (e, bins)
    } else {
        (vec![lo - 0.5, lo + 0.5], 1)
    };
    let mut normal = vec![0u64; bins];
    let mut anomalous = vec![0u64; bins];
    for (&s, &label) in scores.iter().zip(labels) {
        let k = if bins == 1 {
            0
        } else {
            // first bin whose upper edge exceeds s; the last bin takes s == hi
            edges[1..bins].partition_point(|&e| e <= s)
        };
        match label {
            Label::Normal => normal[k] += 1,
            Label::Anomalous => anomalous[k] += 1,
        }
    }
    Ok(ScoreHistogram {
        edges,
        normal,
        anomalous,
    })
}

impl ScoreHistogram {
    /// Tab-separated `bin_lo, bin_hi, count_normal, count_anomalous` with a
    /// header row.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "bin_lo\tbin_hi\tcount_normal\tcount_anomalous")?;
        for k in 0..self.normal.len() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.edges[k],
                self.edges[k + 1],
                self.normal[k],
                self.anomalous[k]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single_cell(value: f64, u: usize, i: usize, j: usize) -> ReceptiveFieldMap {
        let mut m = Array2::zeros((u, u));
        m[[i, j]] = value;
        ReceptiveFieldMap::new(m, "c").unwrap()
    }

    #[test]
    fn kernel_center_and_unit_distance() {
        let g = gaussian_kernel(10.0, 12.0, 1.0, 24, 24).unwrap();
        assert_relative_eq!(g.values[[10, 12]], 1.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-12);
        assert_relative_eq!(g.values[[10, 12]], 0.159155, epsilon = 1e-6);
        assert_relative_eq!(
            g.values[[11, 12]],
            (-0.5f64).exp() / (2.0 * std::f64::consts::PI),
            epsilon = 1e-12
        );
        assert_relative_eq!(g.values[[10, 11]], 0.096532, epsilon = 1e-6);
    }

    #[test]
    fn kernel_unit_mass() {
        let g = gaussian_kernel(15.0, 15.0, 3.0, 31, 31).unwrap();
        assert!((g.sum() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kernel_rejects_bad_sigma() {
        assert!(gaussian_kernel(0.0, 0.0, 0.0, 4, 4).is_err());
        assert!(gaussian_kernel(0.0, 0.0, -1.0, 4, 4).is_err());
    }

    #[test]
    fn zero_map_zero_heatmap() {
        let geo = FieldGeometry::new(224, 224, 28, 28).unwrap();
        let m = ReceptiveFieldMap::new(Array2::zeros((28, 28)), "z").unwrap();
        let hm = upsample_heatmap(&m, &geo, &HeatmapConfig::default()).unwrap();
        assert_eq!(hm.dim(), (224, 224));
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_mass_and_peak() {
        let geo = FieldGeometry::new(64, 64, 8, 8).unwrap();
        let cfg = HeatmapConfig {
            sigma: 2.0,
            ..Default::default()
        };
        let hm = upsample_heatmap(&single_cell(5.0, 8, 3, 4), &geo, &cfg).unwrap();
        assert!((hm.sum() - 5.0).abs() <= 5e-3);
        let (r, c) = hm.argmax();
        let (c1, c2) = geo.center(3, 4);
        assert!((r as f64 - c1).abs() <= 4.0 && (c as f64 - c2).abs() <= 4.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let geo = FieldGeometry::new(64, 64, 8, 8).unwrap();
        let m = ReceptiveFieldMap::new(Array2::zeros((4, 4)), "m").unwrap();
        assert!(upsample_heatmap(&m, &geo, &HeatmapConfig::default()).is_err());
    }

    fn hm(values: Array2<f64>) -> Heatmap {
        Heatmap {
            values,
            image_id: String::new(),
            model_id: String::new(),
        }
    }

    #[test]
    fn display_rule_arithmetic() {
        let cfg = HeatmapConfig::default();
        let n = display_normalize(
            &hm(Array2::from_shape_vec((1, 4), vec![2.0, 2.5, 3.0, 6.0]).unwrap()),
            &cfg,
        );
        assert_relative_eq!(n.values[[0, 1]], 0.5, epsilon = 1e-12);
        assert_eq!(n.values[[0, 2]], 1.0);
        assert_eq!(n.values[[0, 3]], 1.0);

        let ramp = Array2::from_shape_fn((1, 101), |(_, k)| k as f64 / 100.0);
        let n = display_normalize(&hm(ramp.clone()), &cfg);
        for (v, o) in ramp.iter().zip(n.values.iter()) {
            if *v >= 0.25 {
                assert_eq!(*o, 1.0);
            }
        }

        let flat = display_normalize(&hm(Array2::from_elem((3, 3), 7.0)), &cfg);
        assert!(flat.values.iter().all(|&v| v == 0.0));

        let full = HeatmapConfig {
            display_quantile: 1.0,
            ..Default::default()
        };
        let n = display_normalize(&hm(Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 5.0]).unwrap()), &full);
        assert_eq!(n.values.as_slice().unwrap(), &[0.0, 0.25, 1.0]);

        let literal = HeatmapConfig {
            display_range: DisplayRange::AbsoluteFraction,
            ..Default::default()
        };
        // [min, max/4] = [0, 2]
        let n = display_normalize(
            &hm(Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 8.0]).unwrap()),
            &literal,
        );
        assert_eq!(n.values.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn colormap_endpoints_and_blend() {
        let cm = Colormap::BlueYellowRed;
        assert_eq!(cm.lookup(0.0), [0, 0, 255]);
        assert_eq!(cm.lookup(0.5), [255, 255, 0]);
        assert_eq!(cm.lookup(1.0), [255, 0, 0]);

        let cfg = HeatmapConfig::default();
        let zeros = hm(Array2::zeros((3, 5)));
        let img = render_heatmap(&zeros, &cfg, None);
        assert!(img.pixels().all(|p| p.0 == [0, 0, 255]));

        let mut ones = hm(Array2::zeros((2, 2)));
        ones.values[[1, 0]] = 1.0;
        let img = render_heatmap(&ones, &cfg, None);
        assert_eq!(img.get_pixel(0, 1).0, [255, 0, 0]);

        let black = RgbImage::new(2, 2);
        let blended = render_heatmap(&ones, &cfg, Some(&black));
        for (x, y, p) in blended.enumerate_pixels() {
            let c = cfg.colormap.lookup(ones.values[[y as usize, x as usize]]);
            for (got, full) in p.0.iter().zip(c) {
                assert!((*got as f64 - 0.5 * full as f64).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn render_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        render_heatmap_image(&hm(Array2::zeros((4, 4))), &HeatmapConfig::default(), None, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (4, 4));
        let bad = dir.path().join("missing").join("h.png");
        assert!(matches!(
            render_heatmap_image(&hm(Array2::zeros((4, 4))), &HeatmapConfig::default(), None, &bad),
            Err(FcddError::FileWrite { .. })
        ));
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram(&[0.0, 1.0, 2.0, 3.0], &[Label::Normal; 4], 2).unwrap();
        assert_eq!(h.normal, vec![2, 2]);
        assert_eq!(h.anomalous, vec![0, 0]);
        assert_eq!(h.edges, vec![0.0, 1.5, 3.0]);

        let h = score_histogram(&[4.2], &[Label::Anomalous], 20).unwrap();
        assert_eq!(h.anomalous, vec![1]);
        assert!(h.edges[0] <= 4.2 && 4.2 <= h.edges[1]);

        assert!(score_histogram(&[], &[], 3).is_err());
        assert!(score_histogram(&[1.0], &[Label::Normal], 0).is_err());

        let mut buf = Vec::new();
        score_histogram(&[0.0, 1.0], &[Label::Normal, Label::Anomalous], 2)
            .unwrap()
            .write_tsv(&mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "bin_lo\tbin_hi\tcount_normal\tcount_anomalous\n0\t0.5\t1\t0\n0.5\t1\t0\t1\n"
        );
    }

    proptest! {
        #[test]
        fn histogram_conserves_counts(
            data in prop::collection::vec((-1e3f64..1e3, any::<bool>()), 1..200),
            bins in 1usize..30,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<Label> = data.iter().map(|d| if d.1 { Label::Anomalous } else { Label::Normal }).collect();
            let h = score_histogram(&scores, &labels, bins).unwrap();
            let n_anom = labels.iter().filter(|l| l.is_anomalous()).count() as u64;
            prop_assert_eq!(h.anomalous.iter().sum::<u64>(), n_anom);
            prop_assert_eq!(h.normal.iter().sum::<u64>(), labels.len() as u64 - n_anom);
            prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn upsample_is_linear(
            a in prop::collection::vec(0.0f64..10.0, 16),
            b in prop::collection::vec(0.0f64..10.0, 16),
            s in 0.0f64..3.0,
        ) {
            let geo = FieldGeometry::new(32, 32, 4, 4).unwrap();
            let cfg = HeatmapConfig { sigma: 3.0, ..Default::default() };
            let ma = Array2::from_shape_vec((4, 4), a).unwrap();
            let mb = Array2::from_shape_vec((4, 4), b).unwrap();
            let combined = &ma * s + &mb;
            let up = |m: Array2<f64>| upsample_heatmap(&ReceptiveFieldMap::new(m, "x").unwrap(), &geo, &cfg).unwrap().values;
            let lhs = up(combined);
            let rhs = up(ma) * s + up(mb);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12));
            }
        }

        #[test]
        fn single_cell_localizes(i in 1usize..7, j in 1usize..7, value in 0.1f64..100.0) {
            let geo = FieldGeometry::new(64, 64, 8, 8).unwrap();
            let hm = upsample_heatmap(&single_cell(value, 8, i, j), &geo, &HeatmapConfig::default()).unwrap();
            let (r, c) = hm.argmax();
            let (c1, c2) = geo.center(i, j);
            prop_assert!((r as f64 - c1).abs() <= geo.row_stride as f64 / 2.0);
            prop_assert!((c as f64 - c2).abs() <= geo.col_stride as f64 / 2.0);
        }

        #[test]
        fn normalize_bounded_and_affine_invariant(
            vals in prop::collection::vec(-50.0f64..50.0, 4..40),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let cfg = HeatmapConfig::default();
            let base = hm(Array2::from_shape_vec((1, vals.len()), vals.clone()).unwrap());
            let n1 = display_normalize(&base, &cfg);
            prop_assert!(n1.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let moved = hm(base.values.mapv(|v| a * v + b));
            let n2 = display_normalize(&moved, &cfg);
            for (x, y) in n1.values.iter().zip(n2.values.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
