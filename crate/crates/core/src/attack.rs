//! Single-step L∞ gradient-sign attack and epsilon sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_pixels, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{ConfusionMatrix, MicroDenseNet};
use crate::stats::{IntervalMethod, ProportionCI};
use crate::tensor::{Reduction, Tensor};

const GRADIENT_CHUNK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::validation(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::validation("clip_min must be below clip_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    pub levels: Vec<f64>,
}

/// Fifteen budgets evenly spaced from 0 to 0.3.
pub fn epsilon_grid() -> EpsilonGrid {
    EpsilonGrid::linspace(0.3, 15).expect("static grid")
}

impl EpsilonGrid {
    /// `count` levels `max * i / (count - 1)`.
    pub fn linspace(max: f64, count: usize) -> Result<Self> {
        if count < 2 || !(0.0..=1.0).contains(&max) {
            return Err(Error::validation("grid needs at least two levels and max in [0, 1]"));
        }
        let steps = (count - 1) as f64;
        Ok(Self {
            levels: (0..count).map(|i| max * i as f64 / steps).collect(),
        })
    }

    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("epsilon grid is empty"));
        }
        for &e in &levels {
            AttackConfig::new(e).validate()?;
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// First strictly positive level.
    pub fn first_attack(&self) -> Option<f64> {
        self.levels.iter().copied().find(|&e| e > 0.0)
    }
}

fn check_model(model: &MicroDenseNet) -> Result<()> {
    if !model.is_trained() {
        return Err(Error::Usage("attacks require a trained model".into()));
    }
    Ok(())
}

/// Sign of the per-image loss gradient in pixel space, `-1`, `0` or `1`.
/// Summed loss keeps each image's gradient independent of its batch.
pub fn gradient_signs(model: &MicroDenseNet, images: &[LabeledImage]) -> Result<Vec<Vec<f32>>> {
    check_model(model)?;
    let chunks: Vec<Vec<Vec<f32>>> = images
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|i| i.label.index).collect();
            let pixels = batch_pixels(&refs).map_err(usage_on_shape)?;
            let (grad, _) = model
                .input_gradient(&pixels, &labels, Reduction::Sum)
                .map_err(usage_on_shape)?;
            let per = grad.numel() / chunk.len();
            Ok(grad.data().chunks(per).map(|g| g.iter().map(|&v| sign(v)).collect()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn usage_on_shape(e: Error) -> Error {
    match e {
        Error::Dimension { .. } => Error::Usage(format!("model does not accept these images: {e}")),
        other => other,
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + eps * s)`, nudged by at most one ulp so the change never
/// exceeds `eps` in exact arithmetic.
pub fn apply_sign_step(pixels: &Tensor, signs: &[f32], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if signs.len() != pixels.numel() {
        return Err(Error::Dimension {
            op: "fgm",
            axis: "pixels",
            expected: pixels.numel(),
            found: signs.len(),
        });
    }
    let eps32 = cfg.epsilon as f32;
    let data = pixels
        .data()
        .iter()
        .zip(signs)
        .map(|(&x, &s)| {
            let mut a = (x + eps32 * s).clamp(cfg.clip_min, cfg.clip_max);
            while (a as f64 - x as f64).abs() > cfg.epsilon {
                a = step_toward(a, x);
            }
            a
        })
        .collect();
    Tensor::new(pixels.shape().to_vec(), data)
}

fn step_toward(a: f32, target: f32) -> f32 {
    // Adjacent representable value in the direction of `target`.
    let bits = a.to_bits();
    let up = if a == 0.0 { f32::from_bits(1) } else if a > 0.0 { f32::from_bits(bits + 1) } else { f32::from_bits(bits - 1) };
    let down = if a == 0.0 { -f32::from_bits(1) } else if a > 0.0 { f32::from_bits(bits - 1) } else { f32::from_bits(bits + 1) };
    if target > a {
        up
    } else {
        down
    }
}

/// Untargeted single-step attack on one image. The label is kept.
pub fn fgm(model: &MicroDenseNet, image: &LabeledImage, cfg: &AttackConfig) -> Result<LabeledImage> {
    Ok(fgm_batch(model, std::slice::from_ref(image), cfg)?.remove(0))
}

pub fn fgm_batch(model: &MicroDenseNet, images: &[LabeledImage], cfg: &AttackConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let signs = gradient_signs(model, images)?;
    images
        .iter()
        .zip(&signs)
        .map(|(img, s)| Ok(img.with_pixels(apply_sign_step(&img.pixels, s, cfg)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub accuracy: f64,
    pub ci: ProportionCI,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl SweepRow {
    pub fn ci_lower(&self) -> f64 {
        self.ci.lower
    }

    pub fn ci_upper(&self) -> f64 {
        self.ci.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: IntervalMethod,
    pub confidence: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn clean(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.epsilon == 0.0)
    }

    pub fn row(&self, epsilon: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.epsilon - epsilon).abs() < 1e-12)
    }
}

/// Attack every image at every level and score it. The gradient is taken
/// once per image; each level only rescales its sign.
pub fn robustness_sweep(
    model: &MicroDenseNet,
    images: &[LabeledImage],
    grid: &EpsilonGrid,
    method: IntervalMethod,
    confidence: f64,
) -> Result<SweepResult> {
    if images.is_empty() {
        return Err(Error::validation("sweep needs at least one test image"));
    }
    if grid.is_empty() {
        return Err(Error::validation("epsilon grid is empty"));
    }
    let signs = gradient_signs(model, images)?;
    let truth: Vec<usize> = images.iter().map(|i| i.label.index).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &epsilon in &grid.levels {
        let cfg = AttackConfig::new(epsilon);
        let adv: Vec<LabeledImage> = images
            .iter()
            .zip(&signs)
            .map(|(img, s)| Ok(img.with_pixels(apply_sign_step(&img.pixels, s, &cfg)?)))
            .collect::<Result<_>>()?;
        let pred = model.predict(&adv)?;
        let predicted: Vec<usize> = pred.labels.iter().map(|l| l.index).collect();
        let confusion = ConfusionMatrix::from_pairs(model.labels().clone(), &truth, &predicted)?;
        let ci = method.interval(confusion.correct(), confusion.total(), confidence)?;
        rows.push(SweepRow {
            epsilon,
            accuracy: ci.point,
            ci,
            per_class_accuracy: confusion.per_class_recall(),
            confusion,
        });
    }
    Ok(SweepResult {
        method,
        confidence,
        rows,
    })
}

/// Signed perturbation rendered around mid-gray:
/// `clip(0.5 + amplification * (adv - clean), 0, 1)`.
pub fn perturbation_map(clean: &LabeledImage, adv: &LabeledImage, amplification: f64) -> Result<Tensor> {
    if clean.pixels.shape() != adv.pixels.shape() {
        return Err(Error::Dimension {
            op: "perturbation_map",
            axis: "pixels",
            expected: clean.pixels.numel(),
            found: adv.pixels.numel(),
        });
    }
    let data = clean
        .pixels
        .data()
        .iter()
        .zip(adv.pixels.data())
        .map(|(&c, &a)| (0.5 + amplification * (a as f64 - c as f64)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(clean.pixels.shape().to_vec(), data)
}
