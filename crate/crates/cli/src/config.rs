//! Resolved run configuration: defaults, then a config file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fragility_core::data::SplitConfig;
use fragility_core::defense::{AdvTrainConfig, EnsembleConfig, SmoothingConfig, StressTestConfig};
use fragility_core::model::{ModelConfig, TrainConfig};
use fragility_core::stats::IntervalMethod;
use fragility_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Class-per-subdirectory root or manifest file.
    pub path: Option<PathBuf>,
    pub image_size: usize,
    pub channels: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let split = SplitConfig::default();
        Self {
            source: DataSource::Synthetic,
            path: None,
            image_size: 32,
            channels: 1,
            per_class_train: split.per_class_train,
            per_class_test: split.per_class_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub stem_channels: usize,
    pub growth: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            step_size: t.step_size,
            gamma: t.gamma,
            stem_channels: m.stem_channels,
            growth: m.growth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub max_epsilon: f64,
    pub levels: usize,
    pub ci: IntervalMethod,
    pub confidence: f64,
    /// Test images rendered as clean/adversarial/perturbation rows.
    pub triptych_examples: usize,
    pub amplification: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            max_epsilon: 0.3,
            levels: 15,
            ci: IntervalMethod::Wilson,
            confidence: 0.95,
            triptych_examples: 3,
            amplification: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// `None` picks the first nonzero grid level.
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub truncate: f64,
    pub votes: usize,
    pub max_shift: i64,
    pub flips: bool,
    pub adv_steps: usize,
    pub adv_learning_rate: f64,
    pub adv_batch_size: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let s = SmoothingConfig::default();
        let e = EnsembleConfig::default();
        let a = AdvTrainConfig::default();
        Self {
            epsilon: None,
            sigma: s.sigma,
            truncate: s.truncate,
            votes: e.votes,
            max_shift: e.max_shift,
            flips: e.flip_allowed,
            adv_steps: a.steps,
            adv_learning_rate: a.learning_rate,
            adv_batch_size: a.batch_size,
        }
    }
}

/// One model to audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Target {
    /// Live completion endpoint.
    Http { url: String, model: String },
    /// Scripted responses served from a local mock endpoint.
    Fixture { path: PathBuf, model: String },
    /// The two bundled illustrative scripts.
    Builtin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinguaSection {
    /// Empty means the bundled fixtures.
    pub targets: Vec<Target>,
    pub corpus: Option<PathBuf>,
    pub lenient: bool,
    pub parallelism: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LinguaSection {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            corpus: None,
            lenient: false,
            parallelism: 1,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub lingua: LinguaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
            lingua: LinguaSection::default(),
        }
    }
}

impl RunConfig {
    /// Read TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else TOML). Missing keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| format_err(e.to_string()))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        fragility_core::sha256_hex(self.to_json().as_bytes())[..12].to_string()
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            per_class_train: self.data.per_class_train,
            per_class_test: self.data.per_class_test,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.data.channels,
            image_size: self.data.image_size,
            stem_channels: self.train.stem_channels,
            growth: self.train.growth,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            step_size: self.train.step_size,
            gamma: self.train.gamma,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn stress_config(&self, first_attack: f64) -> StressTestConfig {
        let d = &self.defense;
        StressTestConfig {
            epsilon: d.epsilon.unwrap_or(first_attack),
            smoothing: SmoothingConfig {
                sigma: d.sigma,
                truncate: d.truncate,
            },
            ensemble: EnsembleConfig {
                votes: d.votes,
                max_shift: d.max_shift,
                flip_allowed: d.flips,
                seed: self.seed,
            },
            adv_train: AdvTrainConfig {
                steps: d.adv_steps,
                learning_rate: d.adv_learning_rate,
                batch_size: d.adv_batch_size,
                seed: self.seed,
                ..AdvTrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.data.source != DataSource::Synthetic && self.data.path.is_none() {
            return Err(Error::Validation(format!(
                "data source {:?} needs a path",
                self.data.source
            )));
        }
        if self.attack.levels < 2 || !(0.0..=1.0).contains(&self.attack.max_epsilon) {
            return Err(Error::Validation("the epsilon grid needs at least two levels and a maximum in [0, 1]".into()));
        }
        if !(self.attack.confidence > 0.0 && self.attack.confidence < 1.0) {
            return Err(Error::Validation(format!(
                "confidence must lie in (0, 1), got {}",
                self.attack.confidence
            )));
        }
        if let Some(e) = self.defense.epsilon {
            fragility_core::attack::AttackConfig::new(e).validate()?;
        }
        let s = self.stress_config(0.0);
        s.smoothing.validate()?;
        s.ensemble.validate()?;
        s.adv_train.validate()?;
        if self.lingua.parallelism == 0 {
            return Err(Error::Validation("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.seed, 42);
        assert_eq!((c.train.epochs, c.train.learning_rate, c.train.batch_size), (10, 1e-4, 30));
        assert_eq!((c.defense.sigma, c.defense.votes, c.defense.adv_steps), (1.0, 5, 5));
        assert_eq!(c.defense.adv_learning_rate, 1e-5);
        assert_eq!((c.attack.levels, c.attack.max_epsilon), (15, 0.3));
        c.validate().unwrap();
    }

    #[test]
    fn toml_overrides_only_what_it_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[train]\nepochs = 3\n[[lingua.targets]]\nkind = \"http\"\nurl = \"http://localhost:11434\"\nmodel = \"m\"\n",
        )
        .unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 30);
        assert_eq!(c.lingua.targets.len(), 1);
    }

    #[test]
    fn json_config_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"attack": {"ci": "wald"}}"#).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap().attack.ci, IntervalMethod::Wald);
        std::fs::write(&path, r#"{"atack": {}}"#).unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
