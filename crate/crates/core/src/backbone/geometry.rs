use serde::{Deserialize, Serialize};

use super::spec::BackboneSpec;
use crate::error::{FcddError, Result};

/// Placement of output cells on the input image.
///
/// Cell `(i, j)` is centred at `((i + 0.5)·h/u, (j + 0.5)·w/v)` in input pixel
/// units, rows first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub row_stride: usize,
    pub col_stride: usize,
    pub row_centers: Vec<f64>,
    pub col_centers: Vec<f64>,
}

impl FieldGeometry {
    /// Geometry of a `rows × cols` grid laid over a `height × width` image.
    pub fn new(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
            return Err(FcddError::UnsupportedGeometry(format!(
                "{rows}x{cols} cells do not evenly tile a {height}x{width} input"
            )));
        }
        let row_stride = height / rows;
        let col_stride = width / cols;
        Ok(Self {
            rows,
            cols,
            height,
            width,
            row_stride,
            col_stride,
            row_centers: (0..rows).map(|i| (i as f64 + 0.5) * row_stride as f64).collect(),
            col_centers: (0..cols).map(|j| (j as f64 + 0.5) * col_stride as f64).collect(),
        })
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.row_centers[i], self.col_centers[j])
    }
}

/// Receptive-field geometry of a backbone's output map.
pub fn receptive_geometry(spec: &BackboneSpec) -> Result<FieldGeometry> {
    let (h, w, _) = spec.input_size;
    let (u, v, _) = spec.output_size;
    FieldGeometry::new(h, w, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn27_grid() {
        let g = FieldGeometry::new(224, 224, 28, 28).unwrap();
        assert_eq!(g.row_stride, 8);
        assert_eq!(g.row_centers[0], 4.0);
        assert_eq!(g.row_centers[27], 220.0);
        for (i, c) in g.col_centers.iter().enumerate() {
            assert_eq!(*c, 4.0 + 8.0 * i as f64);
        }
    }

    #[test]
    fn single_cell_midpoint() {
        let g = FieldGeometry::new(10, 10, 1, 1).unwrap();
        assert_eq!(g.center(0, 0), (5.0, 5.0));
    }

    #[test]
    fn non_integer_stride_rejected() {
        assert!(matches!(
            FieldGeometry::new(224, 224, 25, 25),
            Err(FcddError::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn centers_inside_and_increasing() {
        let g = FieldGeometry::new(96, 64, 12, 8).unwrap();
        assert!(g.row_centers.windows(2).all(|w| w[0] < w[1]));
        assert!(g.col_centers.windows(2).all(|w| w[0] < w[1]));
        assert!(*g.row_centers.last().unwrap() < 96.0);
        assert!(*g.col_centers.last().unwrap() < 64.0);
    }
}
