//! Dataset discovery, stratified splitting, image loading and a synthetic
//! defect corpus.
//!
//! A dataset root holds `normal/` and `anomalous/` directories of PNG or JPEG
//! files. Manifests are plain tab-separated text.

mod load;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcddError, Result};
use crate::loss::Label;

pub use load::{load_batch, load_image, TARGET_SIZE};
pub use synth::{
    read_defects, synth_background, synth_dataset, synth_sample, DefectKind, DefectRecord, SynthParams, DEFECTS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = FcddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calibration" => Ok(Split::Calibration),
            "test" => Ok(Split::Test),
            other => Err(FcddError::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    /// `None` until the manifest is split.
    pub split: Option<Split>,
    pub id: String,
}

/// 64-bit FNV-1a of the path's UTF-8 form, as 16 hex digits.
pub fn path_id(path: &Path) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.to_string_lossy().as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub seed: Option<u64>,
    pub ratio: Option<[usize; 3]>,
}

/// An image found under the dataset root that could not be used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| FcddError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| FcddError::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lists every image below `root/normal` and `root/anomalous`, sorted by path.
/// Files that are not decodable raster images are returned separately.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Skipped>)> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (sub, label) in [("normal", Label::Normal), ("anomalous", Label::Anomalous)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(FcddError::Layout(format!(
                "{} has no `{sub}/` directory",
                root.display()
            )));
        }
        for path in class_files(&dir)? {
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !EXTENSIONS.contains(&ext.as_str()) {
                skipped.push(Skipped {
                    path,
                    reason: "not a png or jpeg file".into(),
                });
                continue;
            }
            let probe = image::ImageReader::open(&path)
                .map_err(|e| e.to_string())
                .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match probe {
                Ok(_) => records.push(SampleRecord {
                    id: path_id(&path),
                    path,
                    label,
                    split: None,
                }),
                Err(reason) => skipped.push(Skipped { path, reason }),
            }
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            records,
            seed: None,
            ratio: None,
        },
        skipped,
    ))
}

/// Per-part counts for `n` items: floor-proportional for calibration and
/// test, the rest to train, except that a second leftover item goes to the
/// calibration or test part with the larger fractional share so that every
/// part stays within one item of its exact share.
fn split_counts(n: usize, ratio: [usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    let exact = ratio.map(|r| (n * r) as f64 / total as f64);
    let mut counts = ratio.map(|r| n * r / total);
    let mut left = n - counts.iter().sum::<usize>();
    if left > 0 {
        counts[0] += 1;
        left -= 1;
    }
    while left > 0 {
        let frac = |k: usize| exact[k] - counts[k] as f64;
        let k = if frac(1) >= frac(2) { 1 } else { 2 };
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split: each class is shuffled with a class-specific stream of
/// `seed` and cut into train, calibration and test parts. Classes with fewer
/// records than parts go entirely to train, with a warning returned.
pub fn split_manifest(m: &DatasetManifest, ratio: [usize; 3], seed: u64) -> Result<(DatasetManifest, Vec<String>)> {
    if ratio.contains(&0) {
        return Err(FcddError::InvalidParameter(format!(
            "split ratio parts must be positive, got {ratio:?}"
        )));
    }
    let mut warnings = Vec::new();
    let mut records = m.records.clone();
    for (stream, label) in [(0u64, Label::Normal), (1, Label::Anomalous)] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < ratio.len() {
            warnings.push(format!(
                "class {label} has {} records, fewer than {} split parts; all assigned to train",
                idx.len(),
                ratio.len()
            ));
            for &i in &idx {
                records[i].split = Some(Split::Train);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        idx.shuffle(&mut rng);
        let [n_train, n_cal, _] = split_counts(idx.len(), ratio);
        for (pos, &i) in idx.iter().enumerate() {
            records[i].split = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_cal {
                Split::Calibration
            } else {
                Split::Test
            });
        }
    }
    Ok((
        DatasetManifest {
            root: m.root.clone(),
            records,
            seed: Some(seed),
            ratio: Some(ratio),
        },
        warnings,
    ))
}

/// Parses `a:b:c` into three positive integers.
pub fn parse_ratio(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || FcddError::InvalidParameter(format!("ratio must look like 7:1:2, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
        if *o == 0 {
            return Err(bad());
        }
    }
    Ok(out)
}

impl DatasetManifest {
    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    /// `(normal, anomalous)` counts, over all records when `split` is `None`.
    pub fn class_counts(&self, split: Option<Split>) -> (usize, usize) {
        self.records
            .iter()
            .filter(|r| split.is_none() || r.split == split)
            .fold((0, 0), |(n, a), r| match r.label {
                Label::Normal => (n + 1, a),
                Label::Anomalous => (n, a + 1),
            })
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub(crate) fn index(&self) -> HashMap<&str, &SampleRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# root\t{}", self.root.display())?;
        if let Some(seed) = self.seed {
            writeln!(out, "# seed\t{seed}")?;
        }
        if let Some([a, b, c]) = self.ratio {
            writeln!(out, "# ratio\t{a}:{b}:{c}")?;
        }
        writeln!(out, "path\tlabel\tsplit\tid")?;
        for r in &self.records {
            let split = r.split.map_or("unassigned", Split::as_str);
            writeln!(out, "{}\t{}\t{}\t{}", r.path.display(), r.label, split, r.id)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| FcddError::write(path, e))
    }

    pub fn read_tsv(input: impl BufRead) -> Result<Self> {
        let bad = |line: usize, msg: &str| FcddError::InvalidInput(format!("manifest line {line}: {msg}"));
        let mut m = DatasetManifest {
            root: PathBuf::new(),
            records: Vec::new(),
            seed: None,
            ratio: None,
        };
        let mut seen_header = false;
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| FcddError::InvalidInput(e.to_string()))?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once('\t').ok_or_else(|| bad(lineno, "malformed comment"))?;
                match key {
                    "root" => m.root = PathBuf::from(value),
                    "seed" => m.seed = Some(value.parse().map_err(|_| bad(lineno, "bad seed"))?),
                    "ratio" => m.ratio = Some(parse_ratio(value)?),
                    _ => {}
                }
                continue;
            }
            if !seen_header {
                if line != "path\tlabel\tsplit\tid" {
                    return Err(bad(lineno, "expected header `path\\tlabel\\tsplit\\tid`"));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(lineno, "expected 4 columns"));
            }
            let label = match cols[1] {
                "0" => Label::Normal,
                "1" => Label::Anomalous,
                _ => return Err(bad(lineno, "label must be 0 or 1")),
            };
            let split = match cols[2] {
                "unassigned" => None,
                s => Some(s.parse()?),
            };
            m.records.push(SampleRecord {
                path: PathBuf::from(cols[0]),
                label,
                split,
                id: cols[3].to_string(),
            });
        }
        if !seen_header {
            return Err(bad(0, "missing header"));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| FcddError::io(path, e))?;
        Self::read_tsv(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fake_manifest(n_normal: usize, n_anom: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for (n, label, dir) in [
            (n_normal, Label::Normal, "normal"),
            (n_anom, Label::Anomalous, "anomalous"),
        ] {
            for i in 0..n {
                let path = PathBuf::from(format!("r/{dir}/{i:04}.png"));
                records.push(SampleRecord {
                    id: path_id(&path),
                    path,
                    label,
                    split: None,
                });
            }
        }
        DatasetManifest {
            root: "r".into(),
            records,
            seed: None,
            ratio: None,
        }
    }

    fn counts(m: &DatasetManifest, label: Label) -> [usize; 3] {
        Split::ALL.map(|s| {
            m.records
                .iter()
                .filter(|r| r.label == label && r.split == Some(s))
                .count()
        })
    }

    #[test]
    fn split_examples() {
        let (m, w) = split_manifest(&fake_manifest(100, 0), [7, 1, 2], 3).unwrap();
        assert!(w.is_empty());
        assert_eq!(counts(&m, Label::Normal), [70, 10, 20]);
        let (m, _) = split_manifest(&fake_manifest(10, 0), [7, 1, 2], 3).unwrap();
        assert_eq!(counts(&m, Label::Normal), [7, 1, 2]);
        let (m2, _) = split_manifest(&fake_manifest(10, 0), [7, 1, 2], 3).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let (m, w) = split_manifest(&fake_manifest(20, 2), [7, 1, 2], 0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(counts(&m, Label::Anomalous), [2, 0, 0]);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("7:1:2").unwrap(), [7, 1, 2]);
        for bad in ["7:1", "7:1:0", "a:b:c", "7:1:2:1", ""] {
            assert!(parse_ratio(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn tsv_round_trip() {
        let (m, _) = split_manifest(&fake_manifest(12, 5), [7, 1, 2], 9).unwrap();
        let mut buf = Vec::new();
        m.write_tsv(&mut buf).unwrap();
        let back = DatasetManifest::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ids_are_stable() {
        assert_eq!(path_id(Path::new("a/b.png")), path_id(Path::new("a/b.png")));
        assert_ne!(path_id(Path::new("a/b.png")), path_id(Path::new("a/c.png")));
        // FNV-1a of the empty string is the offset basis
        assert_eq!(path_id(Path::new("")), "cbf29ce484222325");
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(n_normal in 0usize..300, n_anom in 0usize..120, seed in any::<u64>()) {
            let base = fake_manifest(n_normal, n_anom);
            let (m, _) = split_manifest(&base, [7, 1, 2], seed).unwrap();
            prop_assert_eq!(m.records.len(), base.records.len());
            for (a, b) in m.records.iter().zip(&base.records) {
                prop_assert_eq!(&a.path, &b.path);
                prop_assert_eq!(a.label, b.label);
                prop_assert!(a.split.is_some());
            }
            for (label, n) in [(Label::Normal, n_normal), (Label::Anomalous, n_anom)] {
                let c = counts(&m, label);
                prop_assert_eq!(c.iter().sum::<usize>(), n);
                if n >= 3 {
                    for (k, r) in [7.0, 1.0, 2.0].iter().enumerate() {
                        let exact = n as f64 * r / 10.0;
                        prop_assert!((c[k] as f64 - exact).abs() <= 1.0, "{:?} vs n={}", c, n);
                    }
                }
            }
        }
    }
}
