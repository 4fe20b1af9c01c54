use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{argmax, MicroDenseNet};
use crate::data::{batch_pixels, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiply the learning rate by `gamma` every `step_size` epochs.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            step_size: 3,
            gamma: 0.5,
            batch_size: 30,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return Err(Error::validation("step size and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::validation("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    /// Learning rate used throughout zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// Adam state for one model's parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &MicroDenseNet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A zero learning rate leaves every weight
    /// bit-identical.
    pub fn step(&mut self, model: &mut MicroDenseNet, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, param) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in param.tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                if lr != 0.0 {
                    *w -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    /// Running accuracy over the epoch's batches, measured before each update.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.4}\n", e.epoch, e.loss, e.train_accuracy));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn check_training_set(model: &MicroDenseNet, images: &[LabeledImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let k = model.config().num_classes;
    if let Some(bad) = images.iter().find(|img| img.label.index >= k) {
        return Err(Error::validation(format!(
            "{} has label index {} but the model has {k} classes",
            bad.source_id, bad.label.index
        )));
    }
    Ok(())
}

/// Mini-batch Adam with step decay. Returns a trained copy; the input model
/// is left untouched.
pub fn train(model: &MicroDenseNet, images: &[LabeledImage], cfg: &TrainConfig) -> Result<(MicroDenseNet, TrainingTrace)> {
    cfg.validate()?;
    check_training_set(model, images)?;
    let mut model = model.clone();
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut trace = TrainingTrace::default();
    let n = images.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|img| img.label.index).collect();
            let pixels = batch_pixels(&batch)?;
            let (loss, grads, logits) = model.loss_and_param_grads(&pixels, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss} in epoch {} at lr {lr:e}; lower the learning rate or check the inputs",
                    epoch + 1
                )));
            }
            let k = model.config().num_classes;
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            loss_sum += loss as f64 * chunk.len() as f64;
            adam.step(&mut model, &grads, lr);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        };
        info!(
            "epoch {:>2} lr {:.3e} loss {:.4} acc {:.3}",
            record.epoch, lr, record.loss, record.train_accuracy
        );
        trace.epochs.push(record);
    }
    model.mark_trained();
    Ok((model, trace))
}
