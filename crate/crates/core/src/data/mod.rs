//! Labeled image sets: label vocabulary, normalization, stratified sampling,
//! the synthetic benchmark and on-disk ingestion.

mod loader;
mod synthetic;

pub use loader::{load_image_directory, load_manifest, LoadReport, LoadWarning, ManifestEntry, ManifestSplit};
pub use synthetic::{generate_synthetic_benchmark, SyntheticConfig, DEFAULT_IMAGE_SIZE};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

/// Ordered, duplicate-free class vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

pub const CLINICAL_LABELS: [&str; 3] = ["COVID-19", "Non-COVID Pneumonia", "Normal"];

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("label set must not be empty"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::validation("label names must be non-empty"));
            }
            if names[..i].contains(name) {
                return Err(Error::validation(format!("duplicate label name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn clinical() -> Self {
        Self::new(CLINICAL_LABELS).expect("static labels are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, index: usize) -> Option<ClassLabel> {
        self.names.get(index).map(|name| ClassLabel {
            index,
            name: name.clone(),
        })
    }

    pub fn by_name(&self, name: &str) -> Option<ClassLabel> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        (0..self.names.len()).filter_map(|i| self.get(i))
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::clinical()
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

/// Image in pixel space `[C, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: ClassLabel,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, label: ClassLabel, source_id: impl Into<String>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "labeled_image",
                axis: "rank",
                expected: 3,
                found: shape.len(),
            });
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            label,
            source_id: source_id.into(),
        })
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    /// Same label and id with replacement pixels.
    pub fn with_pixels(&self, pixels: Tensor) -> LabeledImage {
        LabeledImage {
            pixels,
            label: self.label.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

/// Stack images into an `[N, C, H, W]` batch.
pub fn batch_pixels(images: &[&LabeledImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().map(|img| &img.pixels).collect();
    Tensor::stack(&refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormalizationStats {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::validation("mean and std must have equal, non-zero length"));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("normalization std must be positive"));
        }
        Ok(Self { mean, std })
    }

    /// ImageNet channel statistics.
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn grayscale() -> Self {
        Self {
            mean: vec![0.5],
            std: vec![0.5],
        }
    }

    /// Default statistics for a 1- or 3-channel model.
    pub fn for_channels(channels: usize) -> Result<Self> {
        match channels {
            1 => Ok(Self::grayscale()),
            3 => Ok(Self::imagenet()),
            c => Err(Error::validation(format!("unsupported channel count {c}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel mean and population std over every pixel of `images`.
    pub fn from_images(images: &[LabeledImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::validation("cannot compute statistics of an empty set"))?;
        let (c, _, _) = first.dims();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = vec![0u64; c];
        for img in images {
            let (ic, h, w) = img.dims();
            if ic != c {
                return Err(Error::validation(format!(
                    "{} has {ic} channels, expected {c}",
                    img.source_id
                )));
            }
            for (ch, plane) in img.pixels.data().chunks(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
                count[ch] += plane.len() as u64;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&count)
            .zip(&mean)
            .map(|((q, &n), m)| ((q / n as f64 - m * m).max(0.0)).sqrt().max(1e-6) as f32)
            .collect();
        Self::new(mean.into_iter().map(|m| m as f32).collect(), std)
    }
}

fn check_channels(tensor: &Tensor, stats: &NormalizationStats) -> Result<usize> {
    let shape = tensor.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "normalize",
            axis: "rank",
            expected: 3,
            found: shape.len(),
        });
    }
    if shape[0] != stats.channels() {
        return Err(Error::validation(format!(
            "image has {} channels but normalization stats have {}",
            shape[0],
            stats.channels()
        )));
    }
    Ok(shape[1] * shape[2])
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize(img: &LabeledImage, stats: &NormalizationStats) -> Result<Tensor> {
    let hw = check_channels(&img.pixels, stats)?;
    let data = img
        .pixels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - stats.mean[i / hw]) / stats.std[i / hw])
        .collect();
    Tensor::new(img.pixels.shape().to_vec(), data)
}

/// Inverse of [`normalize`].
pub fn denormalize(tensor: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    let hw = check_channels(tensor, stats)?;
    let data = tensor
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * stats.std[i / hw] + stats.mean[i / hw])
        .collect();
    Tensor::new(tensor.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            per_class_train: 200,
            per_class_test: 50,
            seed: 42,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class_train == 0 || self.per_class_test == 0 {
            return Err(Error::validation("per-class split counts must be positive"));
        }
        Ok(())
    }
}

/// Select exactly `per_class` images of every class present, deterministically
/// for a given seed and independent of input order.
pub fn stratified_sample(images: &[LabeledImage], per_class: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let mut by_class: BTreeMap<usize, Vec<&LabeledImage>> = BTreeMap::new();
    for img in images {
        by_class.entry(img.label.index).or_default().push(img);
    }
    let mut selected = Vec::with_capacity(per_class * by_class.len());
    for (&class, members) in by_class.iter_mut() {
        if members.len() < per_class {
            return Err(Error::validation(format!(
                "class {:?} has {} images, fewer than the {} requested",
                members[0].label.name,
                members.len(),
                per_class
            )));
        }
        members.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        let mut rng = SplitMix64::derive(seed, class as u64);
        rng.shuffle(members);
        selected.extend(members[..per_class].iter().map(|img| (*img).clone()));
    }
    let mut rng = SplitMix64::derive(seed, u64::MAX);
    rng.shuffle(&mut selected);
    Ok(selected)
}

/// Hold out `per_class_test` images of every class for testing; everything
/// else trains. Source ids must be unique.
pub fn holdout_split(images: &[LabeledImage], per_class_test: usize, seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let test = stratified_sample(images, per_class_test, seed)?;
    let held: std::collections::BTreeSet<&str> = test.iter().map(|i| i.source_id.as_str()).collect();
    let train: Vec<LabeledImage> = images.iter().filter(|i| !held.contains(i.source_id.as_str())).cloned().collect();
    if train.is_empty() {
        return Err(Error::validation("no images left for training after the hold-out split"));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(class: usize, id: &str, value: f32) -> LabeledImage {
        let labels = LabelSet::clinical();
        LabeledImage::new(Tensor::full(&[1, 2, 2], value), labels.get(class).unwrap(), id).unwrap()
    }

    fn population(per_class: usize) -> Vec<LabeledImage> {
        (0..3)
            .flat_map(|c| (0..per_class).map(move |i| img(c, &format!("c{c}/{i:03}"), 0.5)))
            .collect()
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let pop = population(6);
        let (train, test) = holdout_split(&pop, 2, 7).unwrap();
        assert_eq!(test.len(), 6);
        assert_eq!(train.len(), 12);
        assert!(train.iter().all(|t| test.iter().all(|s| s.source_id != t.source_id)));
    }

    #[test]
    fn label_set_rejects_duplicates() {
        assert!(LabelSet::new(["a", "b", "a"]).is_err());
        let set = LabelSet::clinical();
        assert_eq!(set.by_name("Normal").unwrap().index, 2);
        assert_eq!(set.get(0).unwrap().name, "COVID-19");
    }

    #[test]
    fn normalize_imagenet_mean_maps_to_zero() {
        let labels = LabelSet::clinical();
        let mut data = vec![0.0; 3];
        data[0] = 0.485;
        let image = LabeledImage::new(Tensor::new(vec![3, 1, 1], data).unwrap(), labels.get(0).unwrap(), "x").unwrap();
        let out = normalize(&image, &NormalizationStats::imagenet()).unwrap();
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn normalize_round_trip() {
        let labels = LabelSet::clinical();
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
        let image = LabeledImage::new(Tensor::new(vec![3, 4, 4], data.clone()).unwrap(), labels.get(1).unwrap(), "x").unwrap();
        let stats = NormalizationStats::imagenet();
        let back = denormalize(&normalize(&image, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_constant_image() {
        let out = normalize(&img(0, "x", 1.0), &NormalizationStats::grayscale()).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_rejects_channel_mismatch() {
        assert!(matches!(
            normalize(&img(0, "x", 0.2), &NormalizationStats::imagenet()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn stratified_sample_counts_and_determinism() {
        let pool = population(80);
        let a = stratified_sample(&pool, 50, 42).unwrap();
        assert_eq!(a.len(), 150);
        for c in 0..3 {
            assert_eq!(a.iter().filter(|i| i.label.index == c).count(), 50);
        }
        let b = stratified_sample(&pool, 50, 42).unwrap();
        assert_eq!(a, b);
        let c = stratified_sample(&pool, 50, 7).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stratified_sample_ignores_input_order() {
        let pool = population(30);
        let mut reversed = pool.clone();
        reversed.reverse();
        assert_eq!(
            stratified_sample(&pool, 10, 42).unwrap(),
            stratified_sample(&reversed, 10, 42).unwrap()
        );
    }

    #[test]
    fn stratified_sample_full_class_is_permutation() {
        let pool = population(12);
        let out = stratified_sample(&pool, 12, 42).unwrap();
        let mut ids: Vec<_> = out.iter().map(|i| i.source_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = pool.iter().map(|i| i.source_id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn stratified_sample_names_short_class() {
        let mut pool = population(10);
        pool.retain(|i| !(i.label.index == 1 && i.source_id.ends_with('9')));
        let err = stratified_sample(&pool, 10, 42).unwrap_err().to_string();
        assert!(err.contains("Non-COVID Pneumonia"), "{err}");
    }

    #[test]
    fn dataset_statistics() {
        let imgs = vec![img(0, "a", 0.2), img(1, "b", 0.6)];
        let stats = NormalizationStats::from_images(&imgs).unwrap();
        assert!((stats.mean[0] - 0.4).abs() < 1e-7);
        assert!((stats.std[0] - 0.2).abs() < 1e-7);
        assert!(NormalizationStats::from_images(&[]).is_err());
    }
}
