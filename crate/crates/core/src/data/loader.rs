use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, LabelSet, LabeledImage, NormalizationStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A file that was skipped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<LoadWarning>,
}

/// Load `root/<class name>/*` for every class in `labels`. Images are
/// decoded to `[0, 1]`, resized to `target_size` square and converted to
/// the channel count of `stats`. Output order is by class, then file name.
pub fn load_image_directory(
    root: &Path,
    labels: &LabelSet,
    stats: &NormalizationStats,
    target_size: usize,
) -> Result<LoadReport> {
    if target_size == 0 {
        return Err(Error::validation("target size must be positive"));
    }
    let mut jobs = Vec::new();
    for label in labels.iter() {
        let dir = root.join(&label.name);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        if files.is_empty() {
            return Err(Error::validation(format!(
                "class directory {} is empty",
                dir.display()
            )));
        }
        files.sort();
        for path in files {
            let id = format!(
                "{}/{}",
                label.name,
                path.file_name().unwrap_or_default().to_string_lossy()
            );
            jobs.push((path, label.clone(), id));
        }
    }
    Ok(decode_all(jobs, stats.channels(), target_size))
}

fn decode_all(jobs: Vec<(PathBuf, ClassLabel, String)>, channels: usize, target_size: usize) -> LoadReport {
    let results: Vec<_> = jobs
        .into_par_iter()
        .map(|(path, label, id)| {
            read_pixels(&path, channels, target_size)
                .and_then(|pixels| LabeledImage::new(pixels, label, id))
                .map_err(|e| LoadWarning {
                    path: path.clone(),
                    reason: e.to_string(),
                })
        })
        .collect();
    let mut report = LoadReport::default();
    for r in results {
        match r {
            Ok(img) => report.images.push(img),
            Err(w) => {
                warn!("skipping {}: {}", w.path.display(), w.reason);
                report.warnings.push(w);
            }
        }
    }
    report
}

/// Decode one PNG/PGM/PPM file into a `[channels, size, size]` tensor.
pub fn read_pixels(path: &Path, channels: usize, target_size: usize) -> Result<Tensor> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))?;
    to_tensor(decoded, channels, target_size)
}

fn to_tensor(img: DynamicImage, channels: usize, size: usize) -> Result<Tensor> {
    let is_color = img.color().has_color();
    let planes: Vec<Vec<f32>> = if is_color && channels == 3 {
        let rgb = resize_rgb(img.to_rgb32f(), size);
        (0..3)
            .map(|c| rgb.pixels().map(|p| p.0[c]).collect())
            .collect()
    } else {
        let gray = resize_luma(img.to_luma32f(), size);
        let plane: Vec<f32> = gray.pixels().map(|p| p.0[0]).collect();
        vec![plane; channels]
    };
    if channels != 1 && channels != 3 {
        return Err(Error::validation(format!("unsupported channel count {channels}")));
    }
    let data: Vec<f32> = planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![channels, size, size], data)
}

fn resize_luma(img: ImageBuffer<Luma<f32>, Vec<f32>>, size: usize) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    if img.width() as usize == size && img.height() as usize == size {
        return img;
    }
    image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
}

fn resize_rgb(img: ImageBuffer<Rgb<f32>, Vec<f32>>, size: usize) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
    if img.width() as usize == size && img.height() as usize == size {
        return img;
    }
    image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestSplitName {
    Train,
    Test,
}

/// One record of a dataset manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: ManifestSplitName,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub warnings: Vec<LoadWarning>,
}

/// Load images listed in a JSON manifest; relative paths resolve against
/// the manifest's directory.
pub fn load_manifest(
    manifest: &Path,
    labels: &LabelSet,
    stats: &NormalizationStats,
    target_size: usize,
) -> Result<ManifestSplit> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::format(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut train_jobs = Vec::new();
    let mut test_jobs = Vec::new();
    for entry in entries {
        let label = labels.by_name(&entry.label).ok_or_else(|| {
            Error::validation(format!("manifest label {:?} is not a known class", entry.label))
        })?;
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let id = entry.path.to_string_lossy().into_owned();
        match entry.split {
            ManifestSplitName::Train => train_jobs.push((path, label, id)),
            ManifestSplitName::Test => test_jobs.push((path, label, id)),
        }
    }
    for (path, _, id) in &test_jobs {
        if train_jobs.iter().any(|(_, _, t)| t == id) {
            return Err(Error::validation(format!(
                "{} appears in both train and test splits",
                path.display()
            )));
        }
    }
    let train = decode_all(train_jobs, stats.channels(), target_size);
    let test = decode_all(test_jobs, stats.channels(), target_size);
    let mut warnings = train.warnings;
    warnings.extend(test.warnings);
    Ok(ManifestSplit {
        train: train.images,
        test: test.images,
        warnings,
    })
}
