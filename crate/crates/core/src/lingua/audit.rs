use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusManifest, Register, Vignette};
use super::endpoint::CompletionBackend;
use super::parse::{parse_label, ParsedLabel};
use super::prompt::build_prompt;
use super::EndpointError;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureMode {
    /// Abort the audit on the first endpoint failure.
    #[default]
    Strict,
    /// Record the instance as unparseable and continue.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub mode: FailureMode,
    /// Concurrent requests; 1 queries sequentially.
    pub parallelism: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            mode: FailureMode::Strict,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: u32,
    pub register: Register,
    pub raw_response: String,
    pub parsed: ParsedLabel,
    pub correct: bool,
    /// `None` for the English rows, which are the reference.
    pub consistent_with_english: Option<bool>,
    pub attempts: u32,
    /// Set when the endpoint failed and the run was lenient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterSummary {
    pub register: Register,
    pub cases: usize,
    pub correct: usize,
    pub consistent: usize,
    pub accuracy: f64,
    pub consistency: f64,
    pub unparseable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub model_name: String,
    pub corpus_sha256: String,
    pub registers: Vec<RegisterSummary>,
    /// Case ids whose parsed answers differ across registers.
    pub flips: Vec<u32>,
    /// Case-then-register order.
    pub outcomes: Vec<CaseOutcome>,
}

impl DriftProfile {
    pub fn summary(&self, register: Register) -> &RegisterSummary {
        self.registers
            .iter()
            .find(|s| s.register == register)
            .expect("profiles carry every register")
    }

    pub fn outcome(&self, case_id: u32, register: Register) -> Option<&CaseOutcome> {
        self.outcomes
            .iter()
            .find(|o| o.case_id == case_id && o.register == register)
    }
}

struct Answer {
    text: String,
    attempts: u32,
    error: Option<EndpointError>,
}

/// Query every corpus instance once and tabulate accuracy, consistency with
/// the English answer, and flips.
pub fn run_drift_audit(
    backend: &dyn CompletionBackend,
    corpus: &CorpusManifest,
    options: &AuditOptions,
) -> Result<DriftProfile> {
    if backend.temperature() != 0.0 {
        return Err(Error::validation(format!(
            "audit runs require temperature 0.0, got {}",
            backend.temperature()
        )));
    }
    if options.parallelism == 0 {
        return Err(Error::validation("parallelism must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    info!(
        "auditing {} with {} instances",
        backend.model_name(),
        corpus.len()
    );
    let ask = |v: &Vignette| -> Answer {
        let prompt = build_prompt(v, corpus.labels());
        match backend.complete(&prompt) {
            Ok(c) => Answer {
                text: c.text,
                attempts: c.attempts,
                error: None,
            },
            Err(e) => {
                let attempts = match &e {
                    EndpointError::Transport { attempts, .. } | EndpointError::Status { attempts, .. } => *attempts,
                    EndpointError::Protocol { .. } => 1,
                };
                Answer {
                    text: String::new(),
                    attempts,
                    error: Some(e),
                }
            }
        }
    };

    let answers: Vec<Answer> = if options.parallelism == 1 {
        let mut out = Vec::with_capacity(corpus.len());
        for v in corpus.vignettes() {
            let a = ask(v);
            if options.mode == FailureMode::Strict {
                if let Some(e) = a.error {
                    return Err(e.into());
                }
            }
            out.push(a);
        }
        out
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism)
            .build()
            .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
        // Results come back in corpus order regardless of completion order.
        let out: Vec<Answer> = pool.install(|| corpus.vignettes().par_iter().map(ask).collect());
        if options.mode == FailureMode::Strict {
            if let Some(e) = out.iter().find_map(|a| a.error.clone()) {
                return Err(e.into());
            }
        }
        out
    };

    let mut grid: BTreeMap<(u32, Register), CaseOutcome> = BTreeMap::new();
    for (v, a) in corpus.vignettes().iter().zip(answers) {
        if let Some(e) = &a.error {
            warn!("case {} ({}) recorded as unparseable: {e}", v.case_id, v.register);
        }
        let parsed = if a.error.is_some() {
            ParsedLabel::Unparseable
        } else {
            parse_label(&a.text, corpus.labels())
        };
        grid.insert(
            (v.case_id, v.register),
            CaseOutcome {
                case_id: v.case_id,
                register: v.register,
                correct: parsed.is(&v.truth),
                raw_response: a.text,
                parsed,
                consistent_with_english: None,
                attempts: a.attempts,
                error: a.error.map(|e| e.to_string()),
            },
        );
    }
    Ok(tabulate(backend.model_name(), corpus, grid))
}

fn tabulate(model: &str, corpus: &CorpusManifest, mut grid: BTreeMap<(u32, Register), CaseOutcome>) -> DriftProfile {
    let case_ids = corpus.case_ids();
    let mut flips = Vec::new();
    for &id in &case_ids {
        let english = grid[&(id, Register::StandardEnglish)].parsed.clone();
        for reg in &Register::ALL[1..] {
            let o = grid.get_mut(&(id, *reg)).expect("corpus is complete");
            o.consistent_with_english = Some(o.parsed.agrees_with(&english));
        }
        let answers: Vec<&ParsedLabel> = Register::ALL.iter().map(|r| &grid[&(id, *r)].parsed).collect();
        if answers.iter().any(|a| *a != answers[0]) {
            flips.push(id);
        }
    }
    let n = case_ids.len();
    let registers = Register::ALL
        .iter()
        .map(|&reg| {
            let rows: Vec<&CaseOutcome> = grid.values().filter(|o| o.register == reg).collect();
            let correct = rows.iter().filter(|o| o.correct).count();
            let consistent = rows
                .iter()
                .filter(|o| o.consistent_with_english.unwrap_or(true))
                .count();
            RegisterSummary {
                register: reg,
                cases: n,
                correct,
                consistent,
                accuracy: correct as f64 / n as f64,
                consistency: consistent as f64 / n as f64,
                unparseable: rows.iter().filter(|o| o.parsed == ParsedLabel::Unparseable).count(),
            }
        })
        .collect();
    DriftProfile {
        model_name: model.to_string(),
        corpus_sha256: corpus.sha256().to_string(),
        registers,
        flips,
        outcomes: grid.into_values().collect(),
    }
}

/// Accuracy of one register relative to English, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterDelta {
    pub register: Register,
    pub accuracy: f64,
    pub consistency: f64,
    pub drop_from_english_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub corpus_sha256: String,
    /// One entry per profile, registers in canonical order.
    pub models: Vec<(String, Vec<RegisterDelta>)>,
}

impl ModelComparison {
    pub fn delta(&self, model: &str, register: Register) -> Option<&RegisterDelta> {
        self.models
            .iter()
            .find(|(m, _)| m == model)?
            .1
            .iter()
            .find(|d| d.register == register)
    }

    /// Plain-text table: one row per register, accuracy and consistency per model.
    pub fn to_table(&self) -> String {
        let mut out = String::from("Register");
        for (m, _) in &self.models {
            out.push_str(&format!("\t{m} accuracy"));
        }
        for (m, _) in &self.models {
            out.push_str(&format!("\t{m} consistency"));
        }
        out.push('\n');
        for (i, reg) in Register::ALL.iter().enumerate() {
            out.push_str(reg.display_name());
            for (_, deltas) in &self.models {
                out.push_str(&format!("\t{:.1}%", deltas[i].accuracy * 100.0));
            }
            for (_, deltas) in &self.models {
                out.push_str(&format!("\t{:.0}%", deltas[i].consistency * 100.0));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-register accuracy drops from each model's own English baseline.
pub fn compare_models(profiles: &[DriftProfile]) -> Result<ModelComparison> {
    if profiles.len() < 2 {
        return Err(Error::validation("comparison needs at least two profiles"));
    }
    let hash = &profiles[0].corpus_sha256;
    if let Some(p) = profiles.iter().find(|p| &p.corpus_sha256 != hash) {
        return Err(Error::validation(format!(
            "profile for {} was run on a different corpus",
            p.model_name
        )));
    }
    let models = profiles
        .iter()
        .map(|p| {
            let base = p.summary(Register::StandardEnglish).correct as f64;
            let n = p.summary(Register::StandardEnglish).cases as f64;
            let deltas = Register::ALL
                .iter()
                .map(|&r| {
                    let s = p.summary(r);
                    RegisterDelta {
                        register: r,
                        accuracy: s.accuracy,
                        consistency: s.consistency,
                        // Exact count difference, scaled once.
                        drop_from_english_pp: (s.correct as f64 - base) * 100.0 / n,
                    }
                })
                .collect();
            (p.model_name.clone(), deltas)
        })
        .collect();
    Ok(ModelComparison {
        corpus_sha256: hash.clone(),
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lingua::{sample_corpus, Completion, MockScript};
    use std::sync::atomic::{AtomicU32, Ordering};

    /// In-process backend answering from a script keyed by prompt.
    struct Scripted {
        name: String,
        answers: std::collections::HashMap<String, String>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(name: &str, corpus: &CorpusManifest, script: &MockScript) -> Self {
            let answers = corpus
                .vignettes()
                .iter()
                .filter_map(|v| Some((build_prompt(v, corpus.labels()), script.get(v.case_id, v.register)?.to_string())))
                .collect();
            Self {
                name: name.into(),
                answers,
                calls: AtomicU32::new(0),
            }
        }
    }

    impl CompletionBackend for Scripted {
        fn model_name(&self) -> &str {
            &self.name
        }
        fn temperature(&self) -> f64 {
            0.0
        }
        fn complete(&self, prompt: &str) -> std::result::Result<Completion, EndpointError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.answers.get(prompt) {
                Some(t) => Ok(Completion {
                    text: t.clone(),
                    attempts: 1,
                }),
                None => Err(EndpointError::Status {
                    url: "scripted".into(),
                    status: 404,
                    body: String::new(),
                    attempts: 1,
                }),
            }
        }
    }

    fn truthful(corpus: &CorpusManifest) -> MockScript {
        let mut s = MockScript::default();
        for v in corpus.vignettes() {
            s.insert(v.case_id, v.register, v.truth.name.clone());
        }
        s
    }

    #[test]
    fn perfect_model_has_no_drift() {
        let corpus = sample_corpus();
        let backend = Scripted::new("oracle", &corpus, &truthful(&corpus));
        let p = run_drift_audit(&backend, &corpus, &AuditOptions::default()).unwrap();
        for s in &p.registers {
            assert_eq!((s.accuracy, s.consistency), (1.0, 1.0));
        }
        assert!(p.flips.is_empty());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 60);
    }

    #[test]
    fn strict_aborts_lenient_records_unparseable() {
        let corpus = sample_corpus();
        let mut script = truthful(&corpus);
        script.0.get_mut(&3).unwrap().remove(&Register::NigerianPidgin);
        let backend = Scripted::new("gappy", &corpus, &script);
        assert!(matches!(
            run_drift_audit(&backend, &corpus, &AuditOptions::default()),
            Err(Error::Endpoint(_))
        ));
        let lenient = AuditOptions {
            mode: FailureMode::Lenient,
            parallelism: 1,
        };
        let p = run_drift_audit(&backend, &corpus, &lenient).unwrap();
        let o = p.outcome(3, Register::NigerianPidgin).unwrap();
        assert_eq!(o.parsed, ParsedLabel::Unparseable);
        assert!(!o.correct && o.consistent_with_english == Some(false));
        assert_eq!(p.summary(Register::NigerianPidgin).correct, 19);
        assert_eq!(p.flips, vec![3]);
    }

    #[test]
    fn unparseable_pair_is_not_consistent() {
        let corpus = sample_corpus();
        let mut script = truthful(&corpus);
        script.insert(5, Register::StandardEnglish, "I cannot help with that.");
        script.insert(5, Register::NigerianPidgin, "I cannot help with that.");
        let backend = Scripted::new("refuser", &corpus, &script);
        let p = run_drift_audit(&backend, &corpus, &AuditOptions::default()).unwrap();
        assert_eq!(p.outcome(5, Register::NigerianPidgin).unwrap().consistent_with_english, Some(false));
        assert_eq!(p.summary(Register::StandardEnglish).consistency, 1.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let corpus = sample_corpus();
        let script = MockScript::from_json(crate::lingua::SAMPLE_SCRIPT_NATLAS).unwrap();
        let backend = Scripted::new("natlas:latest", &corpus, &script);
        let seq = run_drift_audit(&backend, &corpus, &AuditOptions::default()).unwrap();
        let par = run_drift_audit(
            &backend,
            &corpus,
            &AuditOptions {
                mode: FailureMode::Strict,
                parallelism: 4,
            },
        )
        .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn comparison_requires_two_profiles_on_one_corpus() {
        let corpus = sample_corpus();
        let backend = Scripted::new("a", &corpus, &truthful(&corpus));
        let p = run_drift_audit(&backend, &corpus, &AuditOptions::default()).unwrap();
        assert!(compare_models(std::slice::from_ref(&p)).is_err());
        let mut q = p.clone();
        q.corpus_sha256 = "other".into();
        assert!(compare_models(&[p.clone(), q]).is_err());
        let cmp = compare_models(&[p.clone(), p]).unwrap();
        for (_, deltas) in &cmp.models {
            assert!(deltas.iter().all(|d| d.drop_from_english_pp == 0.0));
        }
    }
}
