//! Mini-batch Adam training of a backbone under the spatial one-class loss.

mod checkpoint;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    adapt_backbone, apply_stat_updates, backward, build_backbone, forward_tensor, stack_volumes, to_feature_volumes,
    BackboneSpec, Gradients, Mode, ParamState, ADAPTER_NAMES,
};
use crate::data::{load_batch, DatasetManifest, Split, TARGET_SIZE};
use crate::error::{FcddError, Result};
use crate::loss::{loss_and_gradients, Label, LabeledSampleBatch, SvddConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Adam β₁.
    pub grad_decay: f64,
    /// Adam β₂.
    pub sq_grad_decay: f64,
    pub seed: u64,
    pub use_anomalous_in_train: bool,
    pub backbone: String,
    pub stability_floor: f64,
    /// `(height, width)` images are resized to before the forward pass.
    pub input_size: (usize, usize),
    /// Pretrained weight archive for the deeper backbones.
    pub weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            epochs: 50,
            learning_rate: 1e-4,
            grad_decay: 0.9,
            sq_grad_decay: 0.99,
            seed: 0,
            use_anomalous_in_train: true,
            backbone: "cnn27".into(),
            stability_floor: 1e-6,
            input_size: TARGET_SIZE,
            weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FcddError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("grad_decay", self.grad_decay), ("sq_grad_decay", self.sq_grad_decay)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.stability_floor > 0.0 && self.stability_floor.is_finite()) {
            return bad(format!(
                "stability_floor must be positive, got {}",
                self.stability_floor
            ));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input_size must be nonzero".into());
        }
        Ok(())
    }

    /// Backbone spec at the configured input size and its initial parameters.
    pub fn build_model(&self) -> Result<(BackboneSpec, ParamState)> {
        let (spec, params) = if ADAPTER_NAMES.contains(&self.backbone.as_str()) {
            adapt_backbone(&self.backbone, self.weights.as_deref(), self.seed)?
        } else {
            build_backbone(&self.backbone, self.seed)?
        };
        let (h, w) = self.input_size;
        let spec = spec.with_input_size((h, w, spec.input_size.2))?;
        Ok((spec, params))
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: IndexMap<String, ArrayD<f32>>,
    pub v: IndexMap<String, ArrayD<f32>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamState) -> Self {
        let zeros = params.zeros_like_learnable();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamState, grads: &Gradients, opt: &mut OptState, cfg: &TrainConfig) -> Result<()> {
    for (name, p) in &params.learnable {
        let g = grads
            .get(name)
            .ok_or_else(|| FcddError::InvalidInput(format!("no gradient for `{name}`")))?;
        let m = opt.m.get(name);
        let v = opt.v.get(name);
        if g.shape() != p.shape() || m.map(|a| a.shape()) != Some(p.shape()) || v.map(|a| a.shape()) != Some(p.shape())
        {
            return Err(FcddError::InvalidInput(format!("shape mismatch for `{name}`")));
        }
    }
    if grads.len() != params.learnable.len() {
        return Err(FcddError::InvalidInput("gradients name tensors the model lacks".into()));
    }
    opt.step += 1;
    let t = opt.step as f64;
    let (b1, b2) = (cfg.grad_decay, cfg.sq_grad_decay);
    let step_size = cfg.learning_rate / (1.0 - b1.powf(t));
    let v_corr = 1.0 / (1.0 - b2.powf(t));
    for (name, p) in params.learnable.iter_mut() {
        let g = &grads[name];
        let m = opt.m.get_mut(name).expect("checked above");
        let v = opt.v.get_mut(name).expect("checked above");
        let it = p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()));
        for ((p, &g), (m, v)) in it {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            *p = (*p as f64 - step_size * mn / ((vn * v_corr).sqrt() + ADAM_EPSILON)) as f32;
        }
    }
    Ok(())
}

/// What a training step saw, for logging and instrumentation.
#[derive(Debug, Clone)]
pub struct StepInfo<'a> {
    /// 1-based.
    pub epoch: usize,
    /// 1-based, counted within the epoch.
    pub step: usize,
    pub ids: &'a [&'a str],
    pub labels: &'a [Label],
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

/// Collects epoch logs.
#[derive(Debug, Default)]
pub struct EpochRecorder {
    pub epochs: Vec<EpochLog>,
}

impl TrainObserver for EpochRecorder {
    fn on_epoch(&mut self, log: &EpochLog) {
        self.epochs.push(log.clone());
    }
}

/// Writes `epoch, mean_loss, wall_seconds` rows under a header.
pub fn write_train_log(logs: &[EpochLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch\tmean_loss\twall_seconds")?;
    for l in logs {
        writeln!(out, "{}\t{}\t{:.3}", l.epoch, l.mean_loss, l.wall_seconds)?;
    }
    Ok(())
}

/// Train-split record ids, in manifest order, honouring the label mode.
pub fn training_ids<'a>(cfg: &TrainConfig, manifest: &'a DatasetManifest) -> Vec<&'a str> {
    manifest
        .split(Split::Train)
        .into_iter()
        .filter(|r| cfg.use_anomalous_in_train || r.label == Label::Normal)
        .map(|r| r.id.as_str())
        .collect()
}

pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Checkpoint> {
    train_with_observer(cfg, manifest, &mut ())
}

/// Runs `epochs × ⌈n / batch_size⌉` Adam steps over the train split,
/// reshuffling every epoch with a stream derived from the seed.
pub fn train_with_observer(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ids = training_ids(cfg, manifest);
    if ids.is_empty() {
        return Err(FcddError::Config("train split has no usable records".into()));
    }
    let (spec, mut params) = cfg.build_model()?;
    let svdd = SvddConfig::with_floor(cfg.stability_floor)?;
    let mut opt = OptState::new(&params);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        ids.shuffle(&mut rng);
        let mut total = 0.0;
        for (k, chunk) in ids.chunks(cfg.batch_size).enumerate() {
            let step = k + 1;
            let (x, labels) = load_batch(manifest, chunk, cfg.input_size)?;
            let pass = forward_tensor(&params, &spec, &x, Mode::Train, true)?;
            let volumes = to_feature_volumes(&pass.output).map_err(|_| FcddError::NonFiniteLoss {
                epoch,
                step,
                loss: f64::NAN,
            })?;
            let batch = LabeledSampleBatch::new(volumes, labels.clone())?;
            let (loss, dz) = loss_and_gradients(&batch, &svdd)?;
            observer.on_step(&StepInfo {
                epoch,
                step,
                ids: chunk,
                labels: &labels,
                loss,
            });
            if !loss.is_finite() || dz.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(FcddError::NonFiniteLoss { epoch, step, loss });
            }
            let grad_out = stack_volumes::<f32>(&dz)?;
            let tape = pass.tape.as_ref().expect("recorded");
            let grads = backward(&params, &spec, tape, grad_out)?;
            if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(FcddError::NonFiniteLoss { epoch, step, loss });
            }
            apply_stat_updates(&mut params, &pass.stat_updates);
            drop(pass);
            adam_step(&mut params, &grads, &mut opt, cfg)?;
            total += loss * chunk.len() as f64;
        }
        let mean_loss = total / ids.len() as f64;
        trace.push(mean_loss);
        let log = EpochLog {
            epoch,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: mean loss {mean_loss:.6} ({:.1}s)", log.wall_seconds);
        observer.on_epoch(&log);
    }

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        spec,
        params,
        config: cfg.clone(),
        epoch: cfg.epochs,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_state(v: f32) -> (ParamState, Gradients) {
        let mut learnable = IndexMap::new();
        learnable.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), v));
        let grads = learnable.clone();
        (
            ParamState {
                learnable,
                buffers: IndexMap::new(),
            },
            grads,
        )
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let (mut p, mut g) = scalar_state(0.7);
        g["w"].fill(0.0);
        let mut opt = OptState::new(&p);
        adam_step(&mut p, &g, &mut opt, &cfg).unwrap();
        assert_eq!(p.learnable["w"][[0]], 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [3.0f32, -0.02, 250.0] {
            let (mut p, mut grads) = scalar_state(1.0);
            grads["w"].fill(g);
            let mut opt = OptState::new(&p);
            adam_step(&mut p, &grads, &mut opt, &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = 1.0 - cfg.learning_rate * g as f64 / (g.abs() as f64 + ADAM_EPSILON);
            assert!((p.learnable["w"][[0]] as f64 - expected).abs() < 1e-7, "g = {g}");
        }
    }

    #[test]
    fn adam_recurrence_by_hand() {
        let cfg = TrainConfig::default();
        let (mut p, mut grads) = scalar_state(0.0);
        let mut opt = OptState::new(&p);
        let gs = [0.5, -1.0, 2.0];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            grads["w"].fill(*g as f32);
            adam_step(&mut p, &grads, &mut opt, &cfg).unwrap();
            let t = (t + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            x -= 1e-4 * (m / (1.0 - 0.9f64.powf(t))) / ((v / (1.0 - 0.99f64.powf(t))).sqrt() + 1e-8);
        }
        assert!((p.learnable["w"][[0]] as f64 - x).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let cfg = TrainConfig::default();
        let (p0, mut g) = scalar_state(0.3);
        g["w"].fill(1.5);
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut oa, mut ob) = (OptState::new(&p0), OptState::new(&p0));
        adam_step(&mut a, &g, &mut oa, &cfg).unwrap();
        adam_step(&mut b, &g, &mut ob, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);

        let mut bad = g.clone();
        bad.insert("w".into(), ArrayD::zeros(IxDyn(&[2])));
        assert!(adam_step(&mut a, &bad, &mut oa, &cfg).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.batch_size, c.epochs, c.learning_rate, c.grad_decay, c.sq_grad_decay),
            (30, 50, 1e-4, 0.9, 0.99)
        );
        assert!(c.use_anomalous_in_train);
        c.validate().unwrap();
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..c.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..c.clone()
            },
            TrainConfig {
                grad_decay: 1.0,
                ..c.clone()
            },
            TrainConfig {
                sq_grad_decay: 0.0,
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
