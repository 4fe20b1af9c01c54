use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::SweepResult;
use crate::defense::{format_percent, MitigationReport};
use crate::error::{Error, Result};
use crate::lingua::{compare_models, DriftProfile, ModelComparison, Register};
use crate::model::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub architecture: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCollapse {
    pub class: String,
    pub clean: Option<f64>,
    pub adversarial: Option<f64>,
    /// `(adversarial - clean) * 100`.
    pub change_pp: Option<f64>,
}

/// Failure envelope of one image model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMap {
    pub schema_version: u32,
    pub generated_at: String,
    pub input_hashes: BTreeMap<String, String>,
    pub model: ModelFingerprint,
    pub clean_accuracy: f64,
    pub sweep: SweepResult,
    pub first_attack_epsilon: Option<f64>,
    pub first_attack_collapse: Vec<ClassCollapse>,
    /// First epsilon whose accuracy is below one half.
    pub danger_zone_epsilon: Option<f64>,
    pub mitigation: Option<MitigationReport>,
    /// Fields written by newer versions, kept on rewrite.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl RobustnessMap {
    pub fn build(
        model: ModelFingerprint,
        sweep: SweepResult,
        mitigation: Option<MitigationReport>,
        generated_at: impl Into<String>,
        input_hashes: BTreeMap<String, String>,
    ) -> Result<Self> {
        let clean = sweep
            .clean()
            .ok_or_else(|| Error::validation("robustness map needs a sweep with a clean row"))?;
        let first = sweep.rows.iter().find(|r| r.epsilon > 0.0);
        let first_attack_collapse = clean
            .confusion
            .labels
            .names()
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let c = clean.per_class_accuracy.get(k).copied().flatten();
                let a = first.and_then(|r| r.per_class_accuracy.get(k).copied().flatten());
                ClassCollapse {
                    class: name.clone(),
                    clean: c,
                    adversarial: a,
                    change_pp: c.zip(a).map(|(c, a)| (a - c) * 100.0),
                }
            })
            .collect();
        let map = Self {
            schema_version: SCHEMA_VERSION,
            generated_at: generated_at.into(),
            input_hashes,
            model,
            clean_accuracy: clean.accuracy,
            first_attack_epsilon: first.map(|r| r.epsilon),
            first_attack_collapse,
            danger_zone_epsilon: sweep.rows.iter().find(|r| r.accuracy < 0.5).map(|r| r.epsilon),
            sweep,
            mitigation,
            extra: BTreeMap::new(),
        };
        map.validate()?;
        Ok(map)
    }

    /// Every accuracy must follow from its confusion matrix.
    pub fn validate(&self) -> Result<()> {
        if self.sweep.rows.is_empty() {
            return Err(Error::validation("robustness map has no sweep rows"));
        }
        for r in &self.sweep.rows {
            let derived = r.confusion.overall_accuracy();
            if derived != Some(r.accuracy) || r.ci.successes != r.confusion.correct() || r.per_class_accuracy != r.confusion.per_class_recall() {
                return Err(Error::validation(format!(
                    "sweep row at epsilon {} disagrees with its confusion matrix",
                    r.epsilon
                )));
            }
        }
        if self.sweep.clean().map(|r| r.accuracy) != Some(self.clean_accuracy) {
            return Err(Error::validation("clean accuracy does not match the sweep's clean row"));
        }
        if let Some(m) = &self.mitigation {
            for row in &m.rows {
                if let Some(cm) = &row.confusion {
                    if cm.overall_accuracy() != Some(row.accuracy) {
                        return Err(Error::validation(format!(
                            "mitigation row {} disagrees with its confusion matrix",
                            row.condition.key()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointMetadata {
    pub model_name: String,
    /// `None` for offline fixture runs.
    pub base_url: Option<String>,
    pub temperature: f64,
    /// SHA-256 of the scripted responses when the run was offline.
    pub fixture_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfileDocument {
    pub schema_version: u32,
    pub generated_at: String,
    pub input_hashes: BTreeMap<String, String>,
    pub corpus_sha256: String,
    pub endpoints: Vec<EndpointMetadata>,
    pub profiles: Vec<DriftProfile>,
    pub comparison: Option<ModelComparison>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl DriftProfileDocument {
    pub fn build(
        endpoints: Vec<EndpointMetadata>,
        profiles: Vec<DriftProfile>,
        generated_at: impl Into<String>,
        input_hashes: BTreeMap<String, String>,
    ) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::validation("drift document needs at least one profile"));
        }
        if endpoints.len() != profiles.len() {
            return Err(Error::validation(format!(
                "{} endpoints described for {} profiles",
                endpoints.len(),
                profiles.len()
            )));
        }
        let comparison = if profiles.len() >= 2 { Some(compare_models(&profiles)?) } else { None };
        let doc = Self {
            schema_version: SCHEMA_VERSION,
            generated_at: generated_at.into(),
            input_hashes,
            corpus_sha256: profiles[0].corpus_sha256.clone(),
            endpoints,
            profiles,
            comparison,
            extra: BTreeMap::new(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.profiles {
            if p.corpus_sha256 != self.corpus_sha256 {
                return Err(Error::validation(format!("profile {} used a different corpus", p.model_name)));
            }
            for s in &p.registers {
                if s.consistency > 1.0 || (s.register == Register::StandardEnglish && s.consistency != 1.0) {
                    return Err(Error::validation(format!(
                        "profile {} has impossible consistency {} for {}",
                        p.model_name, s.consistency, s.register
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub robustness_map: Option<PathBuf>,
    pub drift_profile: Option<PathBuf>,
    pub summary: PathBuf,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("bundle documents serialize") + "\n"
}

fn write(path: PathBuf, body: &str) -> Result<PathBuf> {
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Plain-text tables built from the same fields that the JSON documents carry.
pub fn summary_text(map: Option<&RobustnessMap>, drift: Option<&DriftProfileDocument>) -> String {
    let mut out = String::from("Audit summary\n");
    let stamp = map.map(|m| &m.generated_at).or(drift.map(|d| &d.generated_at));
    if let Some(ts) = stamp {
        let _ = writeln!(out, "generated {ts}");
    }
    if let Some(m) = map {
        let n = m.sweep.clean().map_or(0, |r| r.confusion.total());
        let _ = writeln!(
            out,
            "\nRobustness decay ({} {:.0}% interval, N={n})",
            m.sweep.method,
            m.sweep.confidence * 100.0
        );
        let _ = writeln!(out, "{:<10}{:>14}{:>12}{:>12}", "epsilon", "accuracy (%)", "lower (%)", "upper (%)");
        for r in &m.sweep.rows {
            let _ = writeln!(
                out,
                "{:<10}{:>14}{:>12}{:>12}",
                format!("{:.3}", r.epsilon),
                format_percent(r.accuracy),
                format_percent(r.ci.lower),
                format_percent(r.ci.upper)
            );
        }
        match m.danger_zone_epsilon {
            Some(e) => {
                let _ = writeln!(out, "accuracy first falls below 50% at epsilon {e:.3}");
            }
            None => out.push_str("accuracy stays at or above 50% across the grid\n"),
        }
        if let Some(e) = m.first_attack_epsilon {
            let _ = writeln!(out, "\nPer-class accuracy, clean vs epsilon {e:.3}");
            for c in &m.first_attack_collapse {
                let pct = |v: Option<f64>| v.map_or("n/a".to_string(), format_percent);
                let change = c.change_pp.map_or("n/a".to_string(), |d| format!("{d:+.1}"));
                let _ = writeln!(out, "{:<24}{:>8}{:>8}{:>8} pp", c.class, pct(c.clean), pct(c.adversarial), change);
            }
        }
        if let Some(mit) = &m.mitigation {
            out.push('\n');
            out.push_str(&mit.to_table());
        }
    }
    if let Some(d) = drift {
        out.push_str("\nCross-register drift\n");
        match &d.comparison {
            Some(c) => out.push_str(&c.to_table()),
            None => {
                for p in &d.profiles {
                    let _ = writeln!(out, "{}", p.model_name);
                    for s in &p.registers {
                        let _ = writeln!(
                            out,
                            "{:<28}{:>8}%{:>8}%",
                            s.register.display_name(),
                            format_percent(s.accuracy),
                            format!("{:.0}", s.consistency * 100.0)
                        );
                    }
                }
            }
        }
        for p in &d.profiles {
            let flips: Vec<String> = p.flips.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{} flips: {} ({})", p.model_name, p.flips.len(), flips.join(", "));
        }
        if let Some(c) = &d.comparison {
            for (model, deltas) in &c.models {
                for r in deltas.iter().filter(|r| r.register != Register::StandardEnglish) {
                    let _ = writeln!(out, "{model} {} drop from English: {:+.1} pp", r.register.key(), r.drop_from_english_pp);
                }
            }
        }
    }
    out
}

/// Write the JSON documents and the text summary into `out_dir`.
pub fn emit_audit_bundle(map: Option<&RobustnessMap>, drift: Option<&DriftProfileDocument>, out_dir: &Path) -> Result<BundlePaths> {
    if map.is_none() && drift.is_none() {
        return Err(Error::validation("bundle needs a robustness map or a drift profile"));
    }
    if let Some(m) = map {
        m.validate()?;
    }
    if let Some(d) = drift {
        d.validate()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(BundlePaths {
        robustness_map: map.map(|m| write(out_dir.join("robustness_map.json"), &to_json(m))).transpose()?,
        drift_profile: drift.map(|d| write(out_dir.join("drift_profile.json"), &to_json(d))).transpose()?,
        summary: write(out_dir.join("summary.txt"), &summary_text(map, drift))?,
    })
}

pub fn load_robustness_map(path: &Path) -> Result<RobustnessMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: RobustnessMap = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    if map.schema_version > SCHEMA_VERSION {
        log::warn!("{} uses schema {}, newer than {SCHEMA_VERSION}", path.display(), map.schema_version);
    }
    map.validate()?;
    Ok(map)
}

pub fn load_drift_document(path: &Path) -> Result<DriftProfileDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: DriftProfileDocument = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    doc.validate()?;
    Ok(doc)
}
