//! One-class anomaly detection with fully convolutional data descriptions.
//!
//! A convolutional backbone maps each image to a grid of feature vectors.
//! Each grid cell is reduced to a pseudo-Huber response, normal images are
//! trained towards low responses and anomalous ones away from them, and an
//! image is scored by summing its responses. Responses are turned into
//! full-resolution heatmaps by splatting a Gaussian at each cell's
//! receptive-field center.

pub mod archive;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod loss;
pub mod train;

pub use error::{FcddError, Result};
pub use loss::{
    anomaly_score, deep_svdd_loss, fcdd_spatial_loss, huber_bce_loss, loss_and_gradients, loss_gradients,
    pseudo_huber_map, FeatureVolume, Label, LabeledSampleBatch, ReceptiveFieldMap, SvddConfig,
};
