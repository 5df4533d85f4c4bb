//! Forward and backward execution of a [`BackboneSpec`].

use std::sync::Arc;

use ndarray::{Array3, Array4};

use super::ops::{self, BnStats, ConvGeom, PoolGeom};
use super::params::{Gradients, ParamState};
use super::real::Real;
use super::spec::{window_out, BackboneSpec, LayerKind, LayerSpec};
use crate::error::{FcddError, Result};
use crate::loss::FeatureVolume;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running estimate in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Stored running statistics; deterministic and side-effect free.
    Eval,
}

enum Cache<T> {
    Conv {
        input: Arc<Array4<T>>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Arc<Array4<T>>,
        stats: BnStats<T>,
        batch_stats: bool,
    },
    Relu {
        output: Arc<Array4<T>>,
    },
    MaxPool {
        input: Arc<Array4<T>>,
        output: Arc<Array4<T>>,
        geom: PoolGeom,
    },
    Residual {
        branch: Vec<Cache<T>>,
        shortcut: Vec<Cache<T>>,
    },
}

/// Activations retained for a backward pass.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Batch statistics observed by one batchnorm layer in training mode.
pub struct StatUpdate<T> {
    layer: String,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Result of [`forward_tensor`].
pub struct ForwardPass<T> {
    pub output: Array4<T>,
    pub tape: Option<Tape<T>>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

struct Runner<'a, T> {
    params: &'a ParamState<T>,
    mode: Mode,
    record: bool,
    updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Runner<'_, T> {
    fn run(&mut self, layers: &[LayerSpec], mut x: Arc<Array4<T>>, caches: &mut Vec<Cache<T>>) -> Arc<Array4<T>> {
        for layer in layers {
            x = self.step(layer, x, caches);
        }
        x
    }

    fn step(&mut self, layer: &LayerSpec, x: Arc<Array4<T>>, caches: &mut Vec<Cache<T>>) -> Arc<Array4<T>> {
        let (_, h, w, c) = x.dim();
        match &layer.kind {
            LayerKind::Conv {
                kernel,
                out_channels,
                stride,
                padding,
            } => {
                let pad = padding.amount(*kernel);
                let geom = ConvGeom {
                    kernel: *kernel,
                    stride: *stride,
                    pad,
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    out_h: window_out(h, *kernel, *stride, pad).expect("planned"),
                    out_w: window_out(w, *kernel, *stride, pad).expect("planned"),
                    out_c: *out_channels,
                };
                let out = ops::conv_forward(
                    x.view(),
                    self.params.slice(&format!("{}.weight", layer.name)),
                    self.params.slice(&format!("{}.bias", layer.name)),
                    &geom,
                );
                if self.record {
                    caches.push(Cache::Conv { input: x, geom });
                }
                Arc::new(out)
            }
            LayerKind::BatchNorm => {
                let gamma = self.params.slice(&format!("{}.gamma", layer.name));
                let beta = self.params.slice(&format!("{}.beta", layer.name));
                let (stats, batch_stats) = match self.mode {
                    Mode::Train => {
                        let s = ops::bn_batch_stats(x.view(), BN_EPS);
                        self.updates.push(StatUpdate {
                            layer: layer.name.clone(),
                            mean: s.mean.clone(),
                            var: s.unbiased_var.clone(),
                        });
                        (s, true)
                    }
                    Mode::Eval => {
                        let mean = self.params.slice(&format!("{}.running_mean", layer.name)).to_vec();
                        let var = self.params.slice(&format!("{}.running_var", layer.name));
                        let inv_std = var
                            .iter()
                            .map(|v| T::from_f64_lossy(1.0 / (v.to_f64().unwrap_or(1.0) + BN_EPS).sqrt()))
                            .collect();
                        (
                            BnStats {
                                mean,
                                inv_std,
                                unbiased_var: var.to_vec(),
                            },
                            false,
                        )
                    }
                };
                let out = ops::bn_apply(x.view(), &stats, gamma, beta);
                if self.record {
                    caches.push(Cache::BatchNorm {
                        input: x,
                        stats,
                        batch_stats,
                    });
                }
                Arc::new(out)
            }
            LayerKind::Relu => {
                let mut owned = Arc::try_unwrap(x).unwrap_or_else(|shared| (*shared).clone());
                ops::relu_inplace(&mut owned);
                let out = Arc::new(owned);
                if self.record {
                    caches.push(Cache::Relu { output: out.clone() });
                }
                out
            }
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let pad = padding.amount(*kernel);
                let geom = PoolGeom {
                    kernel: *kernel,
                    stride: *stride,
                    pad,
                    out_h: window_out(h, *kernel, *stride, pad).expect("planned"),
                    out_w: window_out(w, *kernel, *stride, pad).expect("planned"),
                };
                let out = Arc::new(ops::maxpool_forward(x.view(), &geom));
                if self.record {
                    caches.push(Cache::MaxPool {
                        input: x,
                        output: out.clone(),
                        geom,
                    });
                }
                out
            }
            LayerKind::Residual { branch, shortcut } => {
                let mut bc = Vec::new();
                let mut sc = Vec::new();
                let a = self.run(branch, x.clone(), &mut bc);
                let b = self.run(shortcut, x, &mut sc);
                let mut sum = Arc::try_unwrap(a).unwrap_or_else(|shared| (*shared).clone());
                sum.zip_mut_with(&*b, |s, v| *s = *s + *v);
                if self.record {
                    caches.push(Cache::Residual {
                        branch: bc,
                        shortcut: sc,
                    });
                }
                Arc::new(sum)
            }
        }
    }
}

fn check_batch<T>(spec: &BackboneSpec, batch: &Array4<T>) -> Result<()> {
    let (n, h, w, c) = batch.dim();
    if n == 0 {
        return Err(FcddError::InvalidInput("empty image batch".into()));
    }
    if (h, w, c) != spec.input_size {
        return Err(FcddError::InvalidInput(format!(
            "batch images are {h}x{w}x{c}, backbone `{}` expects {:?}",
            spec.name, spec.input_size
        )));
    }
    Ok(())
}

/// Runs the backbone on an `n×h×w×c` batch, optionally recording a tape for
/// [`backward`]. Parameters are not modified; training-mode statistics are
/// returned for [`apply_stat_updates`].
pub fn forward_tensor<T: Real>(
    params: &ParamState<T>,
    spec: &BackboneSpec,
    batch: &Array4<T>,
    mode: Mode,
    record: bool,
) -> Result<ForwardPass<T>> {
    check_batch(spec, batch)?;
    params.check(spec)?;
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(FcddError::InvalidInput("image batch contains non-finite values".into()));
    }
    let mut runner = Runner {
        params,
        mode,
        record,
        updates: Vec::new(),
    };
    let mut caches = Vec::new();
    let out = runner.run(
        &spec.layers,
        Arc::new(batch.as_standard_layout().into_owned()),
        &mut caches,
    );
    let output = Arc::try_unwrap(out).unwrap_or_else(|shared| (*shared).clone());
    Ok(ForwardPass {
        output,
        tape: record.then_some(Tape { caches }),
        stat_updates: runner.updates,
    })
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_stat_updates<T: Real>(params: &mut ParamState<T>, updates: &[StatUpdate<T>]) {
    let keep = T::from_f64_lossy(BN_MOMENTUM);
    let take = T::one() - keep;
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            if let Some(buf) = params.buffers.get_mut(&format!("{}.{suffix}", u.layer)) {
                for (r, b) in buf.iter_mut().zip(batch.iter()) {
                    *r = keep * *r + take * *b;
                }
            }
        }
    }
}

/// Splits an `n×u×v×C` output into per-image feature volumes.
pub fn to_feature_volumes<T: Real>(output: &Array4<T>) -> Result<Vec<FeatureVolume>> {
    output
        .outer_iter()
        .enumerate()
        .map(|(i, img)| {
            let values: Array3<f64> = img.mapv(|v| v.to_f64().unwrap_or(f64::NAN));
            FeatureVolume::new(values, i.to_string())
        })
        .collect()
}

/// Backbone forward pass. Training mode updates batchnorm running statistics
/// in `params`; evaluation mode leaves them untouched.
pub fn forward<T: Real>(
    params: &mut ParamState<T>,
    spec: &BackboneSpec,
    batch: &Array4<T>,
    mode: Mode,
) -> Result<Vec<FeatureVolume>> {
    let pass = forward_tensor(params, spec, batch, mode, false)?;
    if mode == Mode::Train {
        apply_stat_updates(params, &pass.stat_updates);
    }
    to_feature_volumes(&pass.output)
}

/// Evaluation-mode forward pass through shared parameters.
pub fn forward_eval<T: Real>(
    params: &ParamState<T>,
    spec: &BackboneSpec,
    batch: &Array4<T>,
) -> Result<Vec<FeatureVolume>> {
    let pass = forward_tensor(params, spec, batch, Mode::Eval, false)?;
    to_feature_volumes(&pass.output)
}

struct Backprop<'a, T> {
    params: &'a ParamState<T>,
    grads: Gradients<T>,
}

impl<T: Real> Backprop<'_, T> {
    fn grad_slice(&mut self, name: &str) -> &mut [T] {
        self.grads
            .get_mut(name)
            .and_then(|g| g.as_slice_mut())
            .expect("gradient buffers mirror parameters")
    }

    fn run(
        &mut self,
        layers: &[LayerSpec],
        caches: &[Cache<T>],
        mut grad: Array4<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
            let need = need_input_grad || i > 0;
            grad = self.step(layer, cache, grad, need)?;
        }
        Some(grad)
    }

    fn step(&mut self, layer: &LayerSpec, cache: &Cache<T>, grad: Array4<T>, need: bool) -> Option<Array4<T>> {
        let params = self.params;
        match cache {
            Cache::Conv { input, geom } => {
                let weight = params.slice(&format!("{}.weight", layer.name));
                let mut gb = self.grad_slice(&format!("{}.bias", layer.name)).to_vec();
                let gw = self.grad_slice(&format!("{}.weight", layer.name));
                let dx = ops::conv_backward(input.view(), grad.view(), weight, geom, gw, &mut gb, need);
                self.grad_slice(&format!("{}.bias", layer.name)).copy_from_slice(&gb);
                dx
            }
            Cache::BatchNorm {
                input,
                stats,
                batch_stats,
            } => {
                let gamma = params.slice(&format!("{}.gamma", layer.name));
                let mut gb = self.grad_slice(&format!("{}.beta", layer.name)).to_vec();
                let gg = self.grad_slice(&format!("{}.gamma", layer.name));
                let dx = ops::bn_backward(input.view(), grad.view(), stats, gamma, *batch_stats, gg, &mut gb);
                self.grad_slice(&format!("{}.beta", layer.name)).copy_from_slice(&gb);
                Some(dx)
            }
            Cache::Relu { output } => Some(ops::relu_backward(output.view(), grad.view())),
            Cache::MaxPool { input, output, geom } => {
                Some(ops::maxpool_backward(input.view(), output.view(), grad.view(), geom))
            }
            Cache::Residual { branch, shortcut } => {
                let LayerKind::Residual {
                    branch: branch_layers,
                    shortcut: shortcut_layers,
                } = &layer.kind
                else {
                    unreachable!("cache mirrors layer kind")
                };
                let mut dx = self.run(branch_layers, branch, grad.clone(), true)?;
                let ds = if shortcut_layers.is_empty() {
                    grad
                } else {
                    self.run(shortcut_layers, shortcut, grad, true)?
                };
                dx.zip_mut_with(&ds, |s, v| *s = *s + *v);
                Some(dx)
            }
        }
    }
}

/// Gradients of all learnable parameters given the gradient of the loss with
/// respect to the backbone output.
pub fn backward<T: Real>(
    params: &ParamState<T>,
    spec: &BackboneSpec,
    tape: &Tape<T>,
    grad_output: Array4<T>,
) -> Result<Gradients<T>> {
    let mut bp = Backprop {
        params,
        grads: params.zeros_like_learnable(),
    };
    if tape.caches.len() != spec.layers.len() {
        return Err(FcddError::InvalidInput("tape does not belong to this backbone".into()));
    }
    bp.run(&spec.layers, &tape.caches, grad_output, false);
    Ok(bp.grads)
}

/// Converts per-image `u×v×C` gradient volumes into a batch tensor.
pub fn stack_volumes<T: Real>(volumes: &[Array3<f64>]) -> Result<Array4<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| FcddError::InvalidInput("no gradient volumes".into()))?;
    let (u, v, c) = first.dim();
    let mut out = Array4::<T>::zeros((volumes.len(), u, v, c));
    for (mut dst, src) in out.outer_iter_mut().zip(volumes) {
        if src.dim() != (u, v, c) {
            return Err(FcddError::InvalidInput("gradient volumes differ in shape".into()));
        }
        dst.zip_mut_with(src, |d, s| *d = T::from_f64_lossy(*s));
    }
    Ok(out)
}
