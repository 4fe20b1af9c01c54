use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, LabelSet};
use crate::error::{Error, Result};

/// The illustrative 20-case corpus bundled with the crate. The texts are
/// authored examples, not clinically validated cases.
pub const SAMPLE_CORPUS_JSON: &str = include_str!("../../assets/illustrative_vignettes.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Register {
    #[serde(rename = "english")]
    StandardEnglish,
    #[serde(rename = "pidgin")]
    NigerianPidgin,
    #[serde(rename = "yoruba_english")]
    YorubaInflectedEnglish,
}

impl Register {
    pub const ALL: [Register; 3] = [
        Register::StandardEnglish,
        Register::NigerianPidgin,
        Register::YorubaInflectedEnglish,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Register::StandardEnglish => "english",
            Register::NigerianPidgin => "pidgin",
            Register::YorubaInflectedEnglish => "yoruba_english",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Register::StandardEnglish => "Standard English",
            Register::NigerianPidgin => "Nigerian Pidgin",
            Register::YorubaInflectedEnglish => "Yoruba-inflected English",
        }
    }
}

impl std::fmt::Display for Register {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Register {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Register::ALL
            .into_iter()
            .find(|r| r.key() == s)
            .ok_or_else(|| Error::validation(format!("unknown register {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vignette {
    pub case_id: u32,
    pub register: Register,
    pub text: String,
    pub truth: ClassLabel,
}

#[derive(Deserialize)]
struct RawVignette {
    case_id: u32,
    register: Register,
    text: String,
    truth: String,
}

/// A validated corpus: every case present in all registers with one truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    vignettes: Vec<Vignette>,
    labels: LabelSet,
    sha256: String,
}

impl CorpusManifest {
    /// Vignettes in case_id-then-register order.
    pub fn vignettes(&self) -> &[Vignette] {
        &self.vignettes
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    /// Hex SHA-256 of the source bytes.
    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    pub fn len(&self) -> usize {
        self.vignettes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vignettes.is_empty()
    }

    pub fn case_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.vignettes.iter().map(|v| v.case_id).collect();
        ids.dedup();
        ids
    }

    pub fn num_cases(&self) -> usize {
        self.case_ids().len()
    }

    pub fn get(&self, case_id: u32, register: Register) -> Option<&Vignette> {
        self.vignettes
            .iter()
            .find(|v| v.case_id == case_id && v.register == register)
    }

    pub fn truth(&self, case_id: u32) -> Option<&ClassLabel> {
        self.get(case_id, Register::StandardEnglish).map(|v| &v.truth)
    }

    /// Number of cases per class, in label order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for v in self.vignettes.iter().filter(|v| v.register == Register::StandardEnglish) {
            counts[v.truth.index] += 1;
        }
        counts
    }
}

pub fn load_corpus(path: &Path, labels: &LabelSet) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, labels).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn sample_corpus() -> CorpusManifest {
    parse_corpus(SAMPLE_CORPUS_JSON, &LabelSet::clinical()).expect("bundled corpus is valid")
}

pub fn parse_corpus(json: &str, labels: &LabelSet) -> Result<CorpusManifest> {
    let raw: Vec<RawVignette> =
        serde_json::from_str(json).map_err(|e| Error::format("<corpus>", e))?;
    if raw.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    let mut by_case: BTreeMap<u32, BTreeMap<Register, Vignette>> = BTreeMap::new();
    for r in raw {
        let truth = labels.by_name(&r.truth).ok_or_else(|| {
            Error::validation(format!("case {}: unknown truth label {:?}", r.case_id, r.truth))
        })?;
        if r.text.trim().is_empty() {
            return Err(Error::validation(format!(
                "case {} ({}) has empty text",
                r.case_id, r.register
            )));
        }
        let slot = by_case.entry(r.case_id).or_default();
        if slot.contains_key(&r.register) {
            return Err(Error::validation(format!(
                "case {} has more than one {} vignette",
                r.case_id, r.register
            )));
        }
        slot.insert(
            r.register,
            Vignette {
                case_id: r.case_id,
                register: r.register,
                text: r.text,
                truth,
            },
        );
    }
    let mut vignettes = Vec::new();
    for (case_id, regs) in by_case {
        for reg in Register::ALL {
            if !regs.contains_key(&reg) {
                return Err(Error::validation(format!(
                    "case {case_id} is missing the {reg} register"
                )));
            }
        }
        let truth = &regs[&Register::StandardEnglish].truth;
        if regs.values().any(|v| &v.truth != truth) {
            return Err(Error::validation(format!(
                "case {case_id} has different truth labels across registers"
            )));
        }
        vignettes.extend(regs.into_values());
    }
    let sha256 = crate::sha256_hex(json.as_bytes());
    Ok(CorpusManifest {
        vignettes,
        labels: labels.clone(),
        sha256,
    })
}
