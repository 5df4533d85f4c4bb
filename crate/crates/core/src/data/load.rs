use std::path::Path;

use image::imageops::FilterType;
use ndarray::{s, Array3, Array4};

use super::DatasetManifest;
use crate::error::{FcddError, Result};
use crate::loss::Label;

/// Network input resolution `(height, width)`.
pub const TARGET_SIZE: (usize, usize) = (224, 224);

/// Decodes an image, resizes it bilinearly to `target` and scales channels to
/// `[0, 1]`. Grayscale sources are replicated across three channels.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| FcddError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    let (h, w) = target;
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let raw = rgb.into_raw();
    let values = raw.into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h, w, 3), values).expect("rgb buffer is h·w·3"))
}

/// Loads the records named by `ids`, in request order, as an `n × h × w × 3`
/// batch with their labels.
pub fn load_batch(m: &DatasetManifest, ids: &[&str], target: (usize, usize)) -> Result<(Array4<f32>, Vec<Label>)> {
    let index = m.index();
    let (h, w) = target;
    let mut batch = Array4::zeros((ids.len(), h, w, 3));
    let mut labels = Vec::with_capacity(ids.len());
    for (k, id) in ids.iter().enumerate() {
        let record = index
            .get(id)
            .ok_or_else(|| FcddError::InvalidInput(format!("id `{id}` is not in the manifest")))?;
        batch
            .slice_mut(s![k, .., .., ..])
            .assign(&load_image(&record.path, target)?);
        labels.push(record.label);
    }
    Ok((batch, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{path_id, SampleRecord};
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn resize_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let big = dir.path().join("big.png");
        RgbImage::from_fn(448, 448, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]))
            .save(&big)
            .unwrap();
        let a = load_image(&big, (224, 224)).unwrap();
        assert_eq!(a.dim(), (224, 224, 3));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let small = dir.path().join("small.png");
        RgbImage::from_pixel(64, 64, Rgb([10, 20, 30])).save(&small).unwrap();
        assert_eq!(load_image(&small, (224, 224)).unwrap().dim(), (224, 224, 3));

        let white = dir.path().join("white.png");
        GrayImage::from_pixel(50, 70, Luma([255])).save(&white).unwrap();
        let wv = load_image(&white, (224, 224)).unwrap();
        assert!(wv.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batch_order_labels_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (i, label) in [Label::Normal, Label::Anomalous].into_iter().enumerate() {
            let p = dir.path().join(format!("{i}.png"));
            RgbImage::from_pixel(8, 8, Rgb([i as u8 * 100, 0, 0])).save(&p).unwrap();
            records.push(SampleRecord {
                id: path_id(&p),
                path: p,
                label,
                split: None,
            });
        }
        let bogus = dir.path().join("bogus.png");
        std::fs::write(&bogus, b"not an image").unwrap();
        records.push(SampleRecord {
            id: "bogus".into(),
            path: bogus.clone(),
            label: Label::Normal,
            split: None,
        });
        let m = DatasetManifest {
            root: dir.path().into(),
            records,
            seed: None,
            ratio: None,
        };
        let ids = [m.records[1].id.as_str(), m.records[0].id.as_str()];
        let (x, labels) = load_batch(&m, &ids, (4, 4)).unwrap();
        assert_eq!(labels, vec![Label::Anomalous, Label::Normal]);
        assert!((x[[0, 0, 0, 0]] - 100.0 / 255.0).abs() < 1e-6);
        let (again, _) = load_batch(&m, &ids, (4, 4)).unwrap();
        assert_eq!(x, again);

        match load_batch(&m, &["bogus"], (4, 4)) {
            Err(FcddError::Load { path, .. }) => assert_eq!(path, bogus),
            other => panic!("expected load error, got {other:?}"),
        }
        assert!(load_batch(&m, &["missing"], (4, 4)).is_err());
    }
}
