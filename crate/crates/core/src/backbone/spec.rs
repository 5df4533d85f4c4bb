use serde::{Deserialize, Serialize};

use crate::error::{FcddError, Result};

/// Spatial padding rule shared by convolutions and pooling.
///
/// `Same` pads by `(kernel − 1) / 2` on each side, which preserves spatial size
/// for odd kernels at stride 1 and halves it (rounding up) at stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    None,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// `branch(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        branch: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: &str, kernel: usize, out_channels: usize) -> Self {
        Self::conv_strided(name, kernel, out_channels, 1)
    }

    pub fn conv_strided(name: &str, kernel: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding: Padding::Same,
            },
        }
    }

    pub fn batch_norm(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::BatchNorm,
        }
    }

    pub fn relu(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn max_pool(name: &str, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn residual(name: &str, branch: Vec<LayerSpec>, shortcut: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Residual { branch, shortcut },
        }
    }

    /// Short human-readable type tag, e.g. `conv3x3` or `maxpool`.
    pub fn type_tag(&self) -> String {
        match &self.kind {
            LayerKind::Conv { kernel, .. } => format!("conv{kernel}x{kernel}"),
            LayerKind::BatchNorm => "batchnorm".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool { .. } => "maxpool".into(),
            LayerKind::Residual { .. } => "residual".into(),
        }
    }
}

/// Spatial output length of a sliding window.
pub(crate) fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Shape of an `(h, w, channels)` activation.
pub type Shape3 = (usize, usize, usize);

/// One entry of a backbone's layer-by-layer shape and parameter plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub type_tag: String,
    pub output: Shape3,
    pub params: usize,
}

/// Per-layer and total learnable parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_layer: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.per_layer.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

/// A named feed-forward convolutional backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub input_size: Shape3,
    pub output_size: Shape3,
}

impl BackboneSpec {
    /// Builds a spec, deriving and recording the output shape.
    pub fn new(name: &str, layers: Vec<LayerSpec>, input_size: Shape3) -> Result<Self> {
        let mut spec = Self {
            name: name.into(),
            layers,
            input_size,
            output_size: (0, 0, 0),
        };
        spec.output_size = spec.derive_output()?;
        Ok(spec)
    }

    /// Output shape implied by the layer list.
    pub fn derive_output(&self) -> Result<Shape3> {
        let mut shape = self.input_size;
        walk_shapes(&self.layers, &mut shape, &mut |_, _, _| {})?;
        Ok(shape)
    }

    /// Checks that the declared output shape matches the derived one.
    pub fn validate(&self) -> Result<()> {
        let derived = self.derive_output()?;
        if derived != self.output_size {
            return Err(FcddError::InvalidInput(format!(
                "backbone `{}` declares output {:?} but layers produce {:?}",
                self.name, self.output_size, derived
            )));
        }
        Ok(())
    }

    /// Same layers re-planned for a different input resolution.
    pub fn with_input_size(&self, input_size: Shape3) -> Result<Self> {
        Self::new(&self.name, self.layers.clone(), input_size)
    }

    /// Output shape and learnable parameter count of every top-level layer.
    pub fn shape_plan(&self) -> Result<Vec<LayerShape>> {
        let mut plan = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_size;
        for layer in &self.layers {
            let mut params = 0;
            walk_shapes(std::slice::from_ref(layer), &mut shape, &mut |_, _, p| params += p)?;
            plan.push(LayerShape {
                name: layer.name.clone(),
                type_tag: layer.type_tag(),
                output: shape,
                params,
            });
        }
        Ok(plan)
    }

    /// Learnable parameter counts: `k²·C_in·C_out + C_out` per conv, `2·C` per
    /// batchnorm. Nested layers are reported individually.
    pub fn param_count(&self) -> Result<ParamCount> {
        let mut per_layer = Vec::new();
        let mut shape = self.input_size;
        walk_shapes(&self.layers, &mut shape, &mut |layer, _, p| {
            if p > 0 {
                per_layer.push((layer.name.clone(), p));
            }
        })?;
        let total = per_layer.iter().map(|(_, c)| c).sum();
        Ok(ParamCount { per_layer, total })
    }
}

/// Visits every leaf layer with its input shape and learnable parameter count,
/// advancing `shape` through the stack.
pub(crate) fn walk_shapes(
    layers: &[LayerSpec],
    shape: &mut Shape3,
    visit: &mut dyn FnMut(&LayerSpec, Shape3, usize),
) -> Result<()> {
    for layer in layers {
        let (h, w, c) = *shape;
        match &layer.kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding,
            } => {
                let pad = padding.amount(*kernel);
                let (oh, ow) = window_out(h, *kernel, *stride, pad)
                    .zip(window_out(w, *kernel, *stride, pad))
                    .ok_or_else(|| too_small(layer, *shape))?;
                visit(layer, *shape, kernel * kernel * c * out_channels + out_channels);
                *shape = (oh, ow, *out_channels);
            }
            LayerKind::BatchNorm => visit(layer, *shape, 2 * c),
            LayerKind::Relu => visit(layer, *shape, 0),
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let pad = padding.amount(*kernel);
                let (oh, ow) = window_out(h, *kernel, *stride, pad)
                    .zip(window_out(w, *kernel, *stride, pad))
                    .ok_or_else(|| too_small(layer, *shape))?;
                visit(layer, *shape, 0);
                *shape = (oh, ow, c);
            }
            LayerKind::Residual { branch, shortcut } => {
                let input = *shape;
                let mut a = input;
                walk_shapes(branch, &mut a, visit)?;
                let mut b = input;
                walk_shapes(shortcut, &mut b, visit)?;
                if a != b {
                    return Err(FcddError::InvalidInput(format!(
                        "residual `{}` branch output {:?} differs from shortcut {:?}",
                        layer.name, a, b
                    )));
                }
                *shape = a;
            }
        }
    }
    Ok(())
}

fn too_small(layer: &LayerSpec, shape: Shape3) -> FcddError {
    FcddError::InvalidInput(format!(
        "layer `{}` cannot process input of shape {:?}",
        layer.name, shape
    ))
}

/// The 27-layer baseline: four pooled stages of 3×3 conv-BN-ReLU blocks with
/// a 1×1 conv head, 224×224×3 → 28×28×512.
pub fn cnn27_layers() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let block = |layers: &mut Vec<LayerSpec>, i: usize, ch: usize| {
        layers.push(LayerSpec::conv(&format!("conv{i}"), 3, ch));
        layers.push(LayerSpec::batch_norm(&format!("bn{i}")));
        layers.push(LayerSpec::relu(&format!("relu{i}")));
    };
    block(&mut layers, 1, 64);
    layers.push(LayerSpec::max_pool("maxpool1", 2, 2, Padding::None));
    block(&mut layers, 2, 128);
    layers.push(LayerSpec::max_pool("maxpool2", 2, 2, Padding::None));
    block(&mut layers, 3, 256);
    block(&mut layers, 4, 256);
    layers.push(LayerSpec::max_pool("maxpool3", 2, 2, Padding::None));
    block(&mut layers, 5, 512);
    block(&mut layers, 6, 512);
    block(&mut layers, 7, 512);
    layers.push(LayerSpec::conv("conv8", 1, 512));
    layers
}

pub const CNN27_INPUT: Shape3 = (224, 224, 3);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_out(224, 3, 1, 1), Some(224));
        assert_eq!(window_out(224, 2, 2, 0), Some(112));
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(2, 3, 1, 0), None);
    }

    #[test]
    fn cnn27_output() {
        let spec = BackboneSpec::new("cnn27", cnn27_layers(), CNN27_INPUT).unwrap();
        assert_eq!(spec.output_size, (28, 28, 512));
        assert_eq!(spec.layers.len(), 25);
        spec.validate().unwrap();
    }

    #[test]
    fn declared_output_mismatch_detected() {
        let mut spec = BackboneSpec::new("cnn27", cnn27_layers(), CNN27_INPUT).unwrap();
        spec.output_size = (14, 14, 512);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn residual_shape_mismatch() {
        let layers = vec![LayerSpec::residual("r", vec![LayerSpec::conv("a", 3, 8)], vec![])];
        assert!(BackboneSpec::new("x", layers, (8, 8, 4)).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = BackboneSpec::new("cnn27", cnn27_layers(), CNN27_INPUT).unwrap();
        let s = serde_json::to_string(&spec).unwrap();
        let back: BackboneSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
