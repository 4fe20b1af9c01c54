//! Procedural three-class texture benchmark.
//!
//! Each class is an oriented sinusoidal grating whose spatial frequency is
//! drawn around a class-specific centre, overlaid on a random brightness
//! level, a smooth illumination ramp and band-limited noise. Brightness,
//! orientation, phase and contrast share one distribution across classes,
//! so only the texture scale carries the label.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, LabelSet, LabeledImage, SplitConfig};
use crate::error::{Error, Result};
use crate::imageops::{convolve_separable_reflect, gaussian_kernel_1d};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

/// Grating frequency centres in cycles per pixel, one per class.
const CLASS_FREQUENCIES: [f64; 3] = [0.06, 0.14, 0.28];
const FREQUENCY_JITTER: f64 = 0.08;
const NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    /// 1 for grayscale, 3 to replicate the plane across RGB.
    pub channels: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            channels: 1,
        }
    }
}

/// Deterministic train/test split of the synthetic benchmark.
pub fn generate_synthetic_benchmark(
    split: &SplitConfig,
    cfg: &SyntheticConfig,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    split.validate()?;
    if cfg.image_size < 16 {
        return Err(Error::validation(format!(
            "synthetic images must be at least 16 pixels, got {}",
            cfg.image_size
        )));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::validation("synthetic benchmark supports 1 or 3 channels"));
    }
    let labels = LabelSet::clinical();
    let train = generate_split(split.seed, "train", 0, split.per_class_train, cfg, &labels)?;
    let test = generate_split(split.seed, "test", 1, split.per_class_test, cfg, &labels)?;
    Ok((train, test))
}

fn generate_split(
    seed: u64,
    name: &str,
    split_tag: u64,
    per_class: usize,
    cfg: &SyntheticConfig,
    labels: &LabelSet,
) -> Result<Vec<LabeledImage>> {
    let jobs: Vec<(ClassLabel, usize)> = labels
        .iter()
        .flat_map(|label| (0..per_class).map(move |i| (label.clone(), i)))
        .collect();
    jobs.into_par_iter()
        .map(|(label, i)| {
            let stream = (split_tag << 48) | ((label.index as u64) << 32) | i as u64;
            let mut rng = SplitMix64::derive(seed, stream);
            let plane = render_texture(&mut rng, label.index, cfg.image_size);
            let mut data = Vec::with_capacity(plane.len() * cfg.channels);
            for _ in 0..cfg.channels {
                data.extend_from_slice(&plane);
            }
            let pixels = Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data)?;
            let id = format!("synthetic/{name}/{}/{i:04}", label.index);
            LabeledImage::new(pixels, label, id)
        })
        .collect()
}

/// One grayscale plane for `class`, values clipped to `[0, 1]`.
fn render_texture(rng: &mut SplitMix64, class: usize, size: usize) -> Vec<f32> {
    let centre = CLASS_FREQUENCIES[class % CLASS_FREQUENCIES.len()];
    let freq = (centre * (1.0 + FREQUENCY_JITTER * rng.normal())).clamp(0.02, 0.45);
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let contrast = rng.uniform(0.2, 0.3);
    let background = rng.uniform(0.35, 0.65);
    let ramp_angle = rng.uniform(0.0, std::f64::consts::TAU);
    let ramp_amp = rng.uniform(0.0, 0.08);

    let noise: Vec<f32> = (0..size * size).map(|_| rng.normal() as f32).collect();
    let kernel = gaussian_kernel_1d(1.0, 4.0);
    let noise = convolve_separable_reflect(&noise, size, size, &kernel);
    // Unit white noise blurred with sigma=1 has std 1/(2*sqrt(pi)).
    let noise_gain = NOISE_STD * 2.0 * std::f64::consts::PI.sqrt();

    let (ct, st) = (theta.cos(), theta.sin());
    let (cr, sr) = (ramp_angle.cos(), ramp_angle.sin());
    let half = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let grating = (std::f64::consts::TAU * freq * (xf * ct + yf * st) + phase).sin();
            let ramp = ramp_amp * ((xf - half) * cr + (yf - half) * sr) / half;
            let v = background + contrast * grating + ramp + noise_gain * noise[y * size + x] as f64;
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}
