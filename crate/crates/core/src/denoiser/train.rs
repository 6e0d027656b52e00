use rand::Rng;

use super::network::{ModelWeights, NetInput};
use super::{MeasurementStack, QuantileConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream;

const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine schedule floor, as a fraction of `learning_rate`.
    pub lr_decay: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.06,
            lr_decay: 0.05,
            patch_size: 32,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size < 2 {
            return Err(Error::Config(
                "train.batch_size must be >= 1 and train.patch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("train.lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A measurement stack and the clean image it should reproduce.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub stack: MeasurementStack,
    pub target: Image,
}

/// Momentum SGD with cosine learning-rate decay over random patches.
///
/// An epoch draws as many patches as it takes to tile every sample once.
/// Per-patch gradients are reduced in a fixed order, so a given seed always
/// reproduces the same weights. Returned weights are rounded to `f32` so they
/// equal what the weights file stores.
pub fn train(
    init: &ModelWeights,
    dataset: &[TrainSample],
    tc: &TrainConfig,
    qc: &QuantileConfig,
) -> Result<(ModelWeights, Vec<f64>)> {
    tc.validate()?;
    qc.validate()?;
    let mut weights = init.clone();
    if tc.epochs == 0 {
        return Ok((weights, Vec::new()));
    }
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for s in dataset {
        if s.stack.dims() != s.target.dims() {
            return Err(Error::Input("training target does not match its stack".into()));
        }
    }
    let min_side = dataset
        .iter()
        .map(|s| s.target.height().min(s.target.width()))
        .min()
        .unwrap();
    let patch = tc.patch_size.min(min_side);
    let tiles: usize = dataset
        .iter()
        .map(|s| ((s.target.height() / patch) * (s.target.width() / patch)).max(1))
        .sum();
    let steps_per_epoch = tiles.div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs) as f64;
    let lr_min = tc.learning_rate * tc.lr_decay;

    let mut rng = stream(tc.seed, 0x74_7261_696e);
    let mut velocity = vec![0.0; ModelWeights::parameter_count()];
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let mut grad = vec![0.0; velocity.len()];
            let mut batch_loss = 0.0;
            for _ in 0..tc.batch_size {
                let k = rng.random_range(0..dataset.len());
                let (h, w) = dataset[k].target.dims();
                let r = rng.random_range(0..=h - patch);
                let c = rng.random_range(0..=w - patch);
                let x = NetInput::from_stack_window(&dataset[k].stack, r, c, patch, patch);
                let t = dataset[k].target.crop(r, c, patch, patch);
                let (loss, g) = weights.loss_and_grad(&x, t.pixels(), qc)?;
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / tc.batch_size as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss {batch_loss} at step {step}"),
                });
            }
            epoch_loss += batch_loss;

            let progress = step as f64 / total_steps;
            let lr = lr_min
                + 0.5 * (tc.learning_rate - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
            for ((p, v), g) in weights
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&grad)
            {
                *v = MOMENTUM * *v + g * scale;
                *p -= lr * *v;
            }
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if !mean.is_finite() || weights.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }
        curve.push(mean);
    }
    weights.quantize_f32();
    weights.epochs = init.epochs + tc.epochs as u32;
    weights.final_loss = *curve.last().unwrap();
    Ok((weights, curve))
}
