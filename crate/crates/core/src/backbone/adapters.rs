//! Deeper published backbones cut down to a 28×28 output grid.
//!
//! Each adapter keeps the named architecture up to the last stage whose
//! spatial output is still 28×28 for a 224×224 input and appends a 1×1
//! convolution head (`head`) to 512 channels. Parameter names follow the
//! usual public naming of each network (`features.N`, `layerK.B.convM`,
//! `Conv2d_XY_KxK.conv`), with our own `[k, k, C_in, C_out]` layout.

use std::path::Path;

use super::params::{tensor_manifest, ParamState, TensorRole};
use super::spec::{BackboneSpec, LayerSpec, Padding, CNN27_INPUT};
use crate::archive::TensorArchive;
use crate::error::{FcddError, Result};

pub const HEAD_CHANNELS: usize = 512;
const HEAD: &str = "head";

/// VGG16 `features` through `conv4_3` + ReLU (index 22).
pub fn vgg16_layers() -> Vec<LayerSpec> {
    let plan: &[&[usize]] = &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512]];
    let mut layers = Vec::new();
    let mut idx = 0;
    for (stage, widths) in plan.iter().enumerate() {
        for &w in widths.iter() {
            layers.push(LayerSpec::conv(&format!("features.{idx}"), 3, w));
            layers.push(LayerSpec::relu(&format!("features.{}", idx + 1)));
            idx += 2;
        }
        if stage < plan.len() - 1 {
            layers.push(LayerSpec::max_pool(&format!("features.{idx}"), 2, 2, Padding::None));
            idx += 1;
        }
    }
    layers.push(LayerSpec::conv(HEAD, 1, HEAD_CHANNELS));
    layers
}

fn bottleneck(prefix: &str, planes: usize, stride: usize, downsample: bool) -> Vec<LayerSpec> {
    let branch = vec![
        LayerSpec::conv(&format!("{prefix}.conv1"), 1, planes),
        LayerSpec::batch_norm(&format!("{prefix}.bn1")),
        LayerSpec::relu(&format!("{prefix}.relu1")),
        LayerSpec::conv_strided(&format!("{prefix}.conv2"), 3, planes, stride),
        LayerSpec::batch_norm(&format!("{prefix}.bn2")),
        LayerSpec::relu(&format!("{prefix}.relu2")),
        LayerSpec::conv(&format!("{prefix}.conv3"), 1, planes * 4),
        LayerSpec::batch_norm(&format!("{prefix}.bn3")),
    ];
    let shortcut = if downsample {
        vec![
            LayerSpec::conv_strided(&format!("{prefix}.downsample.0"), 1, planes * 4, stride),
            LayerSpec::batch_norm(&format!("{prefix}.downsample.1")),
        ]
    } else {
        Vec::new()
    };
    vec![
        LayerSpec::residual(prefix, branch, shortcut),
        LayerSpec::relu(&format!("{prefix}.relu")),
    ]
}

/// ResNet101 stem, `layer1` (3 bottlenecks) and `layer2` (4 bottlenecks).
pub fn resnet101_layers() -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::conv_strided("conv1", 7, 64, 2),
        LayerSpec::batch_norm("bn1"),
        LayerSpec::relu("relu"),
        LayerSpec::max_pool("maxpool", 3, 2, Padding::Same),
    ];
    for b in 0..3 {
        layers.extend(bottleneck(&format!("layer1.{b}"), 64, 1, b == 0));
    }
    for b in 0..4 {
        layers.extend(bottleneck(
            &format!("layer2.{b}"),
            128,
            if b == 0 { 2 } else { 1 },
            b == 0,
        ));
    }
    layers.push(LayerSpec::conv(HEAD, 1, HEAD_CHANNELS));
    layers
}

/// Inception-v3 stem through the second max pool, with same-padded
/// convolutions so that a 224×224 input lands on a 28×28 grid.
pub fn inceptionv3_layers() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let basic = |layers: &mut Vec<LayerSpec>, name: &str, k: usize, ch: usize, stride: usize| {
        layers.push(LayerSpec::conv_strided(&format!("{name}.conv"), k, ch, stride));
        layers.push(LayerSpec::batch_norm(&format!("{name}.bn")));
        layers.push(LayerSpec::relu(&format!("{name}.relu")));
    };
    basic(&mut layers, "Conv2d_1a_3x3", 3, 32, 2);
    basic(&mut layers, "Conv2d_2a_3x3", 3, 32, 1);
    basic(&mut layers, "Conv2d_2b_3x3", 3, 64, 1);
    layers.push(LayerSpec::max_pool("maxpool1", 3, 2, Padding::Same));
    basic(&mut layers, "Conv2d_3b_1x1", 1, 80, 1);
    basic(&mut layers, "Conv2d_4a_3x3", 3, 192, 1);
    layers.push(LayerSpec::max_pool("maxpool2", 3, 2, Padding::Same));
    layers.push(LayerSpec::conv(HEAD, 1, HEAD_CHANNELS));
    layers
}

pub const ADAPTER_NAMES: [&str; 3] = ["vgg16", "resnet101", "inceptionv3"];

pub(crate) fn adapter_spec(name: &str) -> Result<BackboneSpec> {
    let layers = match name {
        "vgg16" => vgg16_layers(),
        "resnet101" => resnet101_layers(),
        "inceptionv3" => inceptionv3_layers(),
        other => return Err(FcddError::UnsupportedBackbone(other.into())),
    };
    BackboneSpec::new(name, layers, CNN27_INPUT)
}

/// Tensor names and shapes an adapter expects from a weight archive; head
/// tensors are optional.
pub fn adapter_manifest(name: &str) -> Result<Vec<(String, Vec<usize>, bool)>> {
    let spec = adapter_spec(name)?;
    Ok(tensor_manifest(&spec)?
        .into_iter()
        .map(|(n, s, _)| {
            let required = !n.starts_with(&format!("{HEAD}."));
            (n, s, required)
        })
        .collect())
}

/// Builds a truncated deeper backbone, loading pretrained tensors when an
/// archive is supplied and initialising from `seed` otherwise.
pub fn adapt_backbone(name: &str, weights: Option<&Path>, seed: u64) -> Result<(BackboneSpec, ParamState)> {
    let spec = adapter_spec(name)?;
    let mut params = ParamState::<f32>::init(&spec, seed)?;
    if let Some(path) = weights {
        let archive =
            TensorArchive::load(path).map_err(|e| FcddError::WeightLoad(format!("{}: {e}", path.display())))?;
        for (tensor, shape, role) in tensor_manifest(&spec)? {
            let is_head = tensor.starts_with(&format!("{HEAD}."));
            let Some(src) = archive.tensors.get(&tensor) else {
                if is_head {
                    continue;
                }
                return Err(FcddError::WeightLoad(format!("archive lacks tensor `{tensor}`")));
            };
            if src.shape() != shape.as_slice() {
                return Err(FcddError::WeightLoad(format!(
                    "tensor `{tensor}` has shape {:?}, adapter expects {:?}",
                    src.shape(),
                    shape
                )));
            }
            let dst = match role {
                TensorRole::Learnable => params.learnable.get_mut(&tensor),
                TensorRole::Buffer => params.buffers.get_mut(&tensor),
            }
            .expect("manifest mirrors params");
            dst.assign(src);
        }
        params.check(&spec).map_err(|e| FcddError::WeightLoad(e.to_string()))?;
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_adapters_land_on_28() {
        for name in ADAPTER_NAMES {
            let spec = adapter_spec(name).unwrap();
            assert_eq!(spec.output_size, (28, 28, 512), "{name}");
        }
    }

    #[test]
    fn vgg16_truncation_point() {
        let spec = adapter_spec("vgg16").unwrap();
        let plan = spec.shape_plan().unwrap();
        let last_body = &plan[plan.len() - 2];
        assert_eq!(last_body.name, "features.22");
        assert_eq!(last_body.output, (28, 28, 512));
        // the next VGG16 layer (pool4) would drop to 14×14
        assert_eq!(crate::backbone::spec::window_out(28, 2, 2, 0), Some(14));
    }

    #[test]
    fn resnet_stage_shapes() {
        let spec = adapter_spec("resnet101").unwrap();
        let plan = spec.shape_plan().unwrap();
        let find = |n: &str| plan.iter().find(|l| l.name == n).unwrap().output;
        assert_eq!(find("maxpool"), (56, 56, 64));
        assert_eq!(find("layer1.2"), (56, 56, 256));
        assert_eq!(find("layer2.0"), (28, 28, 512));
        assert_eq!(find("layer2.3"), (28, 28, 512));
    }

    #[test]
    fn unknown_adapter() {
        assert!(matches!(
            adapt_backbone("alexnet", None, 0),
            Err(FcddError::UnsupportedBackbone(_))
        ));
    }
}
