//! Declarative convolutional backbones: layer specs, shape and parameter
//! accounting, NHWC execution with backward passes, and receptive-field
//! geometry.

pub mod adapters;
pub mod geometry;
mod net;
mod ops;
pub mod params;
mod real;
pub mod spec;

pub use adapters::{adapt_backbone, adapter_manifest, ADAPTER_NAMES};
pub use geometry::{receptive_geometry, FieldGeometry};
pub use net::{
    apply_stat_updates, backward, forward, forward_eval, forward_tensor, stack_volumes, to_feature_volumes,
    ForwardPass, Mode, StatUpdate, Tape, BN_EPS, BN_MOMENTUM,
};
pub use params::{tensor_manifest, Gradients, ParamState, TensorRole};
pub use real::Real;
pub use spec::{BackboneSpec, LayerKind, LayerShape, LayerSpec, Padding, ParamCount, Shape3};

use crate::error::{FcddError, Result};

/// Identifiers accepted by [`build_backbone`].
pub const BACKBONE_NAMES: [&str; 4] = ["cnn27", "vgg16", "resnet101", "inceptionv3"];

/// Spec of a registered backbone at its native 224×224×3 input.
pub fn backbone_spec(name: &str) -> Result<BackboneSpec> {
    match name {
        "cnn27" => BackboneSpec::new("cnn27", spec::cnn27_layers(), spec::CNN27_INPUT),
        n if ADAPTER_NAMES.contains(&n) => adapters::adapter_spec(n),
        other => Err(FcddError::UnsupportedBackbone(other.into())),
    }
}

/// Registered backbone with freshly initialised parameters.
pub fn build_backbone(name: &str, seed: u64) -> Result<(BackboneSpec, ParamState)> {
    let spec = backbone_spec(name)?;
    let params = ParamState::init(&spec, seed)?;
    Ok((spec, params))
}

/// Learnable parameter counts of a spec.
pub fn param_count(spec: &BackboneSpec) -> Result<ParamCount> {
    spec.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Sum of `weights ⊙ output`: a linear read-out whose gradient w.r.t. the
    /// output is exactly `weights`.
    fn readout(params: &ParamState<f64>, spec: &BackboneSpec, x: &Array4<f64>, weights: &Array4<f64>) -> f64 {
        let pass = forward_tensor(params, spec, x, Mode::Train, false).unwrap();
        (&pass.output * weights).sum()
    }

    fn check_gradients(spec: &BackboneSpec, seed: u64) {
        let (h, w, c) = spec.input_size;
        let x = random_batch((3, h, w, c), seed);
        let mut params = ParamState::<f64>::init(spec, seed).unwrap();
        // non-trivial batchnorm affine parameters
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (k, v) in params.learnable.iter_mut() {
            if k.ends_with(".gamma") || k.ends_with(".beta") || k.ends_with(".bias") {
                v.mapv_inplace(|g| g + rng.random_range(-0.3..0.3));
            }
        }
        let (u, v, ch) = spec.output_size;
        let weights = random_batch((3, u, v, ch), seed + 2);

        let pass = forward_tensor(&params, spec, &x, Mode::Train, true).unwrap();
        let grads = backward(&params, spec, pass.tape.as_ref().unwrap(), weights.clone()).unwrap();

        let step = 1e-6;
        let mut checked = 0;
        for name in params.learnable.keys().cloned().collect::<Vec<_>>() {
            let len = params.learnable[&name].len();
            for idx in [0, len / 2, len - 1] {
                let orig = params.learnable[&name].as_slice().unwrap()[idx];
                params.learnable.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig + step;
                let up = readout(&params, spec, &x, &weights);
                params.learnable.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig - step;
                let down = readout(&params, spec, &x, &weights);
                params.learnable.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig;
                let fd = (up - down) / (2.0 * step);
                let an = grads[&name].as_slice().unwrap()[idx];
                // conv biases feeding batchnorm have an exactly-zero gradient
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-5, "{name}[{idx}]: analytic {an} vs numeric {fd}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn backward_matches_finite_differences_plain() {
        let layers = vec![
            LayerSpec::conv("c1", 3, 4),
            LayerSpec::batch_norm("b1"),
            LayerSpec::relu("r1"),
            LayerSpec::max_pool("p1", 2, 2, Padding::None),
            LayerSpec::conv_strided("c2", 3, 5, 2),
            LayerSpec::batch_norm("b2"),
            LayerSpec::relu("r2"),
            LayerSpec::conv("c3", 1, 3),
        ];
        let spec = BackboneSpec::new("tiny", layers, (8, 8, 2)).unwrap();
        check_gradients(&spec, 5);
    }

    #[test]
    fn backward_matches_finite_differences_residual() {
        let layers = vec![
            LayerSpec::conv("stem", 3, 4),
            LayerSpec::max_pool("pool", 3, 2, Padding::Same),
            LayerSpec::residual(
                "block",
                vec![
                    LayerSpec::conv("block.c1", 1, 3),
                    LayerSpec::batch_norm("block.b1"),
                    LayerSpec::relu("block.r1"),
                    LayerSpec::conv_strided("block.c2", 3, 6, 2),
                ],
                vec![LayerSpec::conv_strided("block.down", 1, 6, 2)],
            ),
            LayerSpec::relu("out"),
            LayerSpec::residual("id", vec![LayerSpec::conv("id.c", 3, 6)], vec![]),
        ];
        let spec = BackboneSpec::new("tiny-res", layers, (10, 10, 3)).unwrap();
        check_gradients(&spec, 9);
    }

    #[test]
    fn eval_mode_is_deterministic_and_pure() {
        let layers = vec![
            LayerSpec::conv("c1", 3, 4),
            LayerSpec::batch_norm("b1"),
            LayerSpec::relu("r1"),
        ];
        let spec = BackboneSpec::new("t", layers, (6, 6, 3)).unwrap();
        let mut params = ParamState::<f64>::init(&spec, 1).unwrap();
        let x = random_batch((2, 6, 6, 3), 3);
        let before = params.clone();
        let a = forward(&mut params, &spec, &x, Mode::Eval).unwrap();
        let b = forward(&mut params, &spec, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, before);

        forward(&mut params, &spec, &x, Mode::Train).unwrap();
        assert_ne!(params.buffers, before.buffers);
        assert_eq!(params.learnable, before.learnable);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = BackboneSpec::new("bn", vec![LayerSpec::batch_norm("b")], (2, 2, 1)).unwrap();
        let mut params = ParamState::<f64>::init(&spec, 0).unwrap();
        let x = Array4::from_shape_vec((1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        forward(&mut params, &spec, &x, Mode::Train).unwrap();
        let mean = params.buffers["b.running_mean"][[0]];
        let var = params.buffers["b.running_var"][[0]];
        assert!((mean - 0.1 * 2.5).abs() < 1e-12);
        // unbiased variance of {1,2,3,4} is 5/3
        assert!((var - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let (spec, params) = build_backbone("cnn27", 0).unwrap();
        let x = Array4::<f32>::zeros((1, 64, 64, 3));
        assert!(forward_eval(&params, &spec, &x).is_err());
        let small = spec.with_input_size((64, 64, 3)).unwrap();
        let out = forward_eval(&params, &small, &x).unwrap();
        assert_eq!(out[0].dim(), (8, 8, 512));
    }

    #[test]
    fn unknown_backbone() {
        assert!(matches!(
            build_backbone("unknown", 0),
            Err(FcddError::UnsupportedBackbone(_))
        ));
    }
}
