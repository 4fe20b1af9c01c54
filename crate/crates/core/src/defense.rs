//! Input-transformation and fine-tuning defenses, and the stress test that
//! scores them against one shared adversarial batch.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_sign_step, epsilon_grid, gradient_signs, AttackConfig};
use crate::data::{batch_pixels, ClassLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::imageops::{convolve_separable_reflect, flip_and_shift, gaussian_kernel_1d};
use crate::model::{argmax, evaluate, Adam, ConfusionMatrix, MicroDenseNet};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const ADV_TRAIN_STREAM: u64 = 0xAD7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    /// Kernel radius in standard deviations.
    pub truncate: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            truncate: 4.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.truncate >= 0.0 && self.truncate.is_finite()) {
            return Err(Error::validation(format!("truncate must be non-negative, got {}", self.truncate)));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(gaussian_kernel_1d(self.sigma, self.truncate))
    }
}

/// Blur each channel with a reflect-padded Gaussian and clip to `[0, 1]`.
pub fn gaussian_smooth(img: &LabeledImage, cfg: &SmoothingConfig) -> Result<LabeledImage> {
    let kernel = cfg.kernel()?;
    let (c, h, w) = img.dims();
    let mut data = Vec::with_capacity(c * h * w);
    for plane in img.pixels.data().chunks(h * w) {
        data.extend(
            convolve_separable_reflect(plane, h, w, &kernel)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    Ok(img.with_pixels(Tensor::new(vec![c, h, w], data)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub votes: usize,
    /// Largest absolute shift in pixels along each axis.
    pub max_shift: i64,
    pub flip_allowed: bool,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            votes: 5,
            max_shift: 5,
            flip_allowed: true,
            seed: 42,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.votes == 0 {
            return Err(Error::validation("ensemble needs at least one vote"));
        }
        if self.max_shift < 0 {
            return Err(Error::validation("max_shift must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub label: ClassLabel,
    /// Votes per class.
    pub tally: Vec<usize>,
    pub mean_probabilities: Vec<f64>,
}

/// Count votes per class.
pub fn tally_votes(votes: &[usize], num_classes: usize) -> Vec<usize> {
    let mut tally = vec![0; num_classes];
    for &v in votes {
        tally[v] += 1;
    }
    tally
}

/// Plurality winner. Ties go to the higher mean probability, then the lower
/// class index.
pub fn resolve_tally(tally: &[usize], mean_probabilities: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..tally.len() {
        let better = tally[k] > tally[best]
            || (tally[k] == tally[best] && mean_probabilities[k] > mean_probabilities[best]);
        if better {
            best = k;
        }
    }
    best
}

fn ensemble_with_rng(model: &MicroDenseNet, img: &LabeledImage, cfg: &EnsembleConfig, rng: &mut SplitMix64) -> Result<EnsembleResult> {
    let dims = img.dims();
    let augmented: Vec<LabeledImage> = (0..cfg.votes)
        .map(|_| {
            let flip = cfg.flip_allowed && rng.bernoulli(0.5);
            let dx = rng.range_inclusive(-cfg.max_shift, cfg.max_shift);
            let dy = rng.range_inclusive(-cfg.max_shift, cfg.max_shift);
            let data = flip_and_shift(img.pixels.data(), dims, flip, dx, dy, 0.0);
            Ok(img.with_pixels(Tensor::new(img.pixels.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&LabeledImage> = augmented.iter().collect();
    let probs = model.predict_proba(&batch_pixels(&refs)?)?;
    let k = model.config().num_classes;
    let votes: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let tally = tally_votes(&votes, k);
    // f64 accumulation keeps the mean of identical rows exact.
    let mean_probabilities: Vec<f64> = (0..k)
        .map(|c| probs.iter().map(|p| p[c] as f64).sum::<f64>() / cfg.votes as f64)
        .collect();
    let winner = resolve_tally(&tally, &mean_probabilities);
    Ok(EnsembleResult {
        label: model.labels().get(winner).expect("class index in range"),
        tally,
        mean_probabilities,
    })
}

/// Majority vote over `cfg.votes` random flips and shifts of one image.
/// Augmentations are drawn from `SplitMix64::derive(cfg.seed, 0)`.
pub fn ensemble_predict(model: &MicroDenseNet, img: &LabeledImage, cfg: &EnsembleConfig) -> Result<EnsembleResult> {
    cfg.validate()?;
    ensemble_with_rng(model, img, cfg, &mut SplitMix64::derive(cfg.seed, 0))
}

/// Image `i` draws from `SplitMix64::derive(cfg.seed, i)`, so results do not
/// depend on scheduling.
pub fn ensemble_predict_batch(model: &MicroDenseNet, images: &[LabeledImage], cfg: &EnsembleConfig) -> Result<Vec<EnsembleResult>> {
    cfg.validate()?;
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| ensemble_with_rng(model, img, cfg, &mut SplitMix64::derive(cfg.seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            learning_rate: 1e-5,
            batch_size: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::validation("adversarial training needs at least one step"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvTrainStats {
    pub optimizer_steps: usize,
    pub adversarial_crafts: usize,
}

/// A few Adam steps on FGM batches crafted against the model being tuned.
/// Returns a new model; the input is never modified.
pub fn mini_adversarial_train(
    model: &MicroDenseNet,
    train_images: &[LabeledImage],
    cfg: &AdvTrainConfig,
    attack: &AttackConfig,
) -> Result<(MicroDenseNet, AdvTrainStats)> {
    cfg.validate()?;
    attack.validate()?;
    crate::model::check_training_set(model, train_images)?;
    if !model.is_trained() {
        return Err(Error::Usage("adversarial fine-tuning requires a trained model".into()));
    }
    let mut tuned = model.clone();
    let mut adam = Adam::new(&tuned, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    SplitMix64::derive(cfg.seed, ADV_TRAIN_STREAM).shuffle(&mut order);
    let mut stats = AdvTrainStats {
        optimizer_steps: 0,
        adversarial_crafts: 0,
    };
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let batch: Vec<LabeledImage> = (0..cfg.batch_size.min(order.len()))
            .map(|j| train_images[order[(cursor + j) % order.len()]].clone())
            .collect();
        cursor = (cursor + batch.len()) % order.len();
        let signs = gradient_signs(&tuned, &batch)?;
        let adv: Vec<LabeledImage> = batch
            .iter()
            .zip(&signs)
            .map(|(img, s)| Ok(img.with_pixels(apply_sign_step(&img.pixels, s, attack)?)))
            .collect::<Result<_>>()?;
        stats.adversarial_crafts += adv.len();
        let refs: Vec<&LabeledImage> = adv.iter().collect();
        let labels: Vec<usize> = adv.iter().map(|i| i.label.index).collect();
        let (loss, grads, _) = tuned.loss_and_param_grads(&batch_pixels(&refs)?, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("adversarial fine-tuning loss became {loss} at step {}", step + 1)));
        }
        adam.step(&mut tuned, &grads, cfg.learning_rate);
        stats.optimizer_steps += 1;
    }
    Ok((tuned, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "adversarial-no-defense")]
    Adversarial,
    #[serde(rename = "gaussian")]
    GaussianSmoothing,
    #[serde(rename = "ensemble")]
    EnsembleVoting,
    #[serde(rename = "adv-train")]
    AdversarialTraining,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clean,
        Condition::Adversarial,
        Condition::GaussianSmoothing,
        Condition::EnsembleVoting,
        Condition::AdversarialTraining,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Adversarial => "adversarial-no-defense",
            Condition::GaussianSmoothing => "gaussian",
            Condition::EnsembleVoting => "ensemble",
            Condition::AdversarialTraining => "adv-train",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Condition::Clean => "Clean (no attack)",
            Condition::Adversarial => "Adversarial, no defense",
            Condition::GaussianSmoothing => "Gaussian smoothing",
            Condition::EnsembleVoting => "Ensemble voting",
            Condition::AdversarialTraining => "Mini adversarial training",
        }
    }

    pub fn is_defense(self) -> bool {
        !matches!(self, Condition::Clean | Condition::Adversarial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationRow {
    pub condition: Condition,
    pub accuracy: f64,
    /// `(accuracy - clean) * 100`.
    pub delta_pp: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Absent when the row was built from bare accuracies.
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub epsilon: f64,
    pub rows: Vec<MitigationRow>,
}

/// Percent with one decimal, e.g. `89.3`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Signed percentage-point delta, e.g. `-16.6%`.
pub fn format_delta(delta_pp: f64) -> String {
    let s = format!("{delta_pp:+.1}");
    if s == "-0.0" { "+0.0%".into() } else { s + "%" }
}

impl MitigationReport {
    fn from_rows(epsilon: f64, rows: Vec<(Condition, f64, Vec<Option<f64>>, Option<ConfusionMatrix>)>) -> Result<Self> {
        let clean = rows
            .iter()
            .find(|r| r.0 == Condition::Clean)
            .map(|r| r.1)
            .ok_or_else(|| Error::validation("mitigation report needs a clean row"))?;
        for (cond, acc, ..) in &rows {
            if !(0.0..=1.0).contains(acc) {
                return Err(Error::validation(format!("{} accuracy {acc} outside [0, 1]", cond.key())));
            }
        }
        Ok(Self {
            epsilon,
            rows: rows
                .into_iter()
                .map(|(condition, accuracy, per_class_accuracy, confusion)| MitigationRow {
                    condition,
                    accuracy,
                    delta_pp: (accuracy - clean) * 100.0,
                    per_class_accuracy,
                    confusion,
                })
                .collect(),
        })
    }

    /// Report from bare accuracies, e.g. numbers copied from another study.
    pub fn from_accuracies(epsilon: f64, rows: &[(Condition, f64)]) -> Result<Self> {
        Self::from_rows(epsilon, rows.iter().map(|&(c, a)| (c, a, Vec::new(), None)).collect())
    }

    pub fn row(&self, condition: Condition) -> Option<&MitigationRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// Short verdict for a row, judged against the clean and undefended rows.
    pub fn assessment(&self, condition: Condition) -> &'static str {
        let Some(row) = self.row(condition) else { return "" };
        let clean = self.row(Condition::Clean).map_or(row.accuracy, |r| r.accuracy);
        let undefended = self.row(Condition::Adversarial).map(|r| r.accuracy);
        match condition {
            Condition::Clean => "baseline",
            _ if row.accuracy >= clean => "no loss",
            Condition::Adversarial => "clinically dangerous",
            _ if undefended.is_some_and(|u| row.accuracy < u) => "worse than no defense",
            _ if undefended.is_some_and(|u| row.accuracy == u) => "no effect",
            _ => "partial recovery, insufficient",
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,accuracy,delta_pp,assessment\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.1},{}", r.condition.key(), r.accuracy, r.delta_pp, self.assessment(r.condition));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("Mitigation stress test at epsilon {:.3}\n", self.epsilon);
        let _ = writeln!(out, "{:<28}{:>14}{:>12}  Assessment", "Condition", "Accuracy (%)", "vs. clean");
        for r in &self.rows {
            let delta = if r.condition == Condition::Clean { "-".to_string() } else { format_delta(r.delta_pp) };
            let _ = writeln!(
                out,
                "{:<28}{:>14}{:>12}  {}",
                r.condition.display_name(),
                format_percent(r.accuracy),
                delta,
                self.assessment(r.condition)
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressTestConfig {
    pub epsilon: f64,
    pub smoothing: SmoothingConfig,
    pub ensemble: EnsembleConfig,
    pub adv_train: AdvTrainConfig,
}

impl Default for StressTestConfig {
    fn default() -> Self {
        Self {
            epsilon: epsilon_grid().first_attack().expect("grid has a positive level"),
            smoothing: SmoothingConfig::default(),
            ensemble: EnsembleConfig::default(),
            adv_train: AdvTrainConfig::default(),
        }
    }
}

/// Score every condition on one adversarial batch crafted against `model`.
/// The fine-tuned model sees the same batch; it is tuned on `train_images`.
pub fn mitigation_stress_test(
    model: &MicroDenseNet,
    train_images: &[LabeledImage],
    test_images: &[LabeledImage],
    cfg: &StressTestConfig,
) -> Result<MitigationReport> {
    let attack = AttackConfig::new(cfg.epsilon);
    attack.validate()?;
    cfg.smoothing.validate()?;
    cfg.ensemble.validate()?;
    cfg.adv_train.validate()?;
    if test_images.is_empty() {
        return Err(Error::validation("stress test needs at least one test image"));
    }
    let signs = gradient_signs(model, test_images)?;
    let adv: Vec<LabeledImage> = test_images
        .iter()
        .zip(&signs)
        .map(|(img, s)| Ok(img.with_pixels(apply_sign_step(&img.pixels, s, &attack)?)))
        .collect::<Result<_>>()?;

    let scored = |m: &MicroDenseNet, images: &[LabeledImage]| -> Result<(f64, Vec<Option<f64>>, Option<ConfusionMatrix>)> {
        let ev = evaluate(m, images)?;
        Ok((ev.overall_accuracy, ev.per_class_accuracy, Some(ev.confusion)))
    };

    let clean = scored(model, test_images)?;
    let undefended = scored(model, &adv)?;
    let smoothed: Vec<LabeledImage> = adv
        .par_iter()
        .map(|img| gaussian_smooth(img, &cfg.smoothing))
        .collect::<Result<_>>()?;
    let smoothing = scored(model, &smoothed)?;

    let votes = ensemble_predict_batch(model, &adv, &cfg.ensemble)?;
    let truth: Vec<usize> = adv.iter().map(|i| i.label.index).collect();
    let predicted: Vec<usize> = votes.iter().map(|v| v.label.index).collect();
    let cm = ConfusionMatrix::from_pairs(model.labels().clone(), &truth, &predicted)?;
    let ensemble = (cm.overall_accuracy().expect("non-empty"), cm.per_class_recall(), Some(cm));

    let (tuned, _) = mini_adversarial_train(model, train_images, &cfg.adv_train, &attack)?;
    let adv_train = scored(&tuned, &adv)?;

    let rows = [
        (Condition::Clean, clean),
        (Condition::Adversarial, undefended),
        (Condition::GaussianSmoothing, smoothing),
        (Condition::EnsembleVoting, ensemble),
        (Condition::AdversarialTraining, adv_train),
    ]
    .into_iter()
    .map(|(c, (a, p, m))| (c, a, p, m))
    .collect();
    MitigationReport::from_rows(cfg.epsilon, rows)
}
