use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::spec::{walk_shapes, BackboneSpec, LayerKind};
use crate::error::{FcddError, Result};

/// Named parameter tensors of a backbone.
///
/// Learnable tensors (`<layer>.weight`, `<layer>.bias`, `<bn>.gamma`,
/// `<bn>.beta`) are optimised; buffers (`<bn>.running_mean`,
/// `<bn>.running_var`) are only touched by training-mode forward passes.
/// Conv weights are laid out `[k, k, C_in, C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState<T = f32> {
    pub learnable: IndexMap<String, ArrayD<T>>,
    pub buffers: IndexMap<String, ArrayD<T>>,
}

/// Gradients keyed like [`ParamState::learnable`].
pub type Gradients<T = f32> = IndexMap<String, ArrayD<T>>;

/// Whether a tensor is optimised or a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Learnable,
    Buffer,
}

/// Every tensor a spec needs, in declaration order: `(name, shape, role)`.
pub fn tensor_manifest(spec: &BackboneSpec) -> Result<Vec<(String, Vec<usize>, TensorRole)>> {
    let mut out = Vec::new();
    let mut shape = spec.input_size;
    walk_shapes(&spec.layers, &mut shape, &mut |layer, (_, _, c), _| match &layer.kind {
        LayerKind::Conv {
            kernel, out_channels, ..
        } => {
            out.push((
                format!("{}.weight", layer.name),
                vec![*kernel, *kernel, c, *out_channels],
                TensorRole::Learnable,
            ));
            out.push((
                format!("{}.bias", layer.name),
                vec![*out_channels],
                TensorRole::Learnable,
            ));
        }
        LayerKind::BatchNorm => {
            out.push((format!("{}.gamma", layer.name), vec![c], TensorRole::Learnable));
            out.push((format!("{}.beta", layer.name), vec![c], TensorRole::Learnable));
            out.push((format!("{}.running_mean", layer.name), vec![c], TensorRole::Buffer));
            out.push((format!("{}.running_var", layer.name), vec![c], TensorRole::Buffer));
        }
        _ => {}
    })?;
    Ok(out)
}

impl<T: Real> ParamState<T> {
    /// Fresh parameters: conv kernels ~ N(0, 2/(k²·C_in)), biases 0,
    /// batchnorm scale 1 / shift 0, running mean 0 / variance 1.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut learnable = IndexMap::new();
        let mut buffers = IndexMap::new();
        for (name, shape, role) in tensor_manifest(spec)? {
            let len: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                let fan_in = shape[0] * shape[1] * shape[2];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| FcddError::InvalidParameter(e.to_string()))?;
                (0..len).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                vec![T::one(); len]
            } else {
                vec![T::zero(); len]
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches length");
            match role {
                TensorRole::Learnable => learnable.insert(name, arr),
                TensorRole::Buffer => buffers.insert(name, arr),
            };
        }
        Ok(Self { learnable, buffers })
    }

    /// Verifies that every tensor the spec needs is present with its shape and
    /// that running variances are positive.
    pub fn check(&self, spec: &BackboneSpec) -> Result<()> {
        for (name, shape, role) in tensor_manifest(spec)? {
            let map = match role {
                TensorRole::Learnable => &self.learnable,
                TensorRole::Buffer => &self.buffers,
            };
            let t = map
                .get(&name)
                .ok_or_else(|| FcddError::InvalidInput(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(FcddError::InvalidInput(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if name.ends_with(".running_var")
                && t.iter()
                    .any(|v| v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
            {
                return Err(FcddError::InvalidInput(format!("`{name}` must be positive")));
            }
        }
        Ok(())
    }

    pub fn zeros_like_learnable(&self) -> Gradients<T> {
        self.learnable
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect()
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable.values().map(|a| a.len()).sum()
    }

    pub(crate) fn slice(&self, name: &str) -> &[T] {
        self.learnable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .unwrap_or_else(|| panic!("parameter `{name}` checked before use"))
            .as_slice()
            .expect("parameters are contiguous")
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ParamState<U> {
        let conv = |m: &IndexMap<String, ArrayD<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN)))))
                .collect()
        };
        ParamState {
            learnable: conv(&self.learnable),
            buffers: conv(&self.buffers),
        }
    }
}
